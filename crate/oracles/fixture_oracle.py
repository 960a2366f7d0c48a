"""Independent reference for the closed-loop suppression numbers.

Reads the fixture JSON printed by `cargo run -p eots-core --example
dump_fixture` and recomputes the rollout, regularization and per-timestep
optimization with numpy's SVD and jax autodiff in float64. Nothing here
shares code with the Rust implementation.

    python3 oracles/fixture_oracle.py fixture.json
"""

import json
import sys

import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402


def load(path):
    d = json.load(open(path))
    arr = {k: np.array(d[k], dtype=np.float64) for k in
           ("w_q", "w_k", "w_v", "w_o", "time_embed", "embeddings", "latent")}
    arr.update({k: d[k] for k in ("timesteps", "d_attn", "prompt_len", "ne_indices", "pe_indices")})
    return arr


def forward(f, z, t, c):
    q = (z + f["time_embed"][t - 1]) @ f["w_q"]
    k = c.T @ f["w_k"]
    a = jax.nn.softmax(q @ k.T / jnp.sqrt(f["d_attn"]), axis=1)
    res = a @ (c.T @ f["w_v"]) @ f["w_o"]
    return a, res


def mass(a, idx):
    return float(np.asarray(a)[:, idx].sum() / a.shape[0])


def regularize(f, c, gamma):
    if gamma == 0.0:
        return np.array(c)
    n = c.shape[1]
    cols = list(f["ne_indices"]) + list(range(f["prompt_len"] + 1, n))
    chi = c[:, cols]
    u, s, vt = np.linalg.svd(chi, full_matrices=False)
    out = np.array(c)
    out[:, cols] = (u * (np.exp(-gamma * s) * s)) @ vt
    return out


def run(f, gamma=1.0, cutoff=20, iters=10, eta=0.1, pl=1.0, nl=0.5):
    T = f["timesteps"]
    pe, ne = f["pe_indices"], f["ne_indices"]
    c0 = f["embeddings"]
    c_reg = regularize(f, c0, gamma)
    z = f["latent"]
    halvings = 0
    steps = []
    losses = []
    for step in range(T):
        t = T - step
        c_hat = c_reg
        if step < cutoff:
            a_ref, _ = forward(f, z, t, c0)
            a_pe, a_ne = a_ref[:, pe], a_ref[:, ne]

            def loss(c):
                a, _ = forward(f, z, t, c)
                return pl * jnp.sum((a[:, pe] - a_pe) ** 2) - nl * jnp.sum((a[:, ne] - a_ne) ** 2)

            vg = jax.value_and_grad(loss)
            prev = None
            for _ in range(iters):
                val, g = vg(jnp.asarray(c_hat))
                val = float(val)
                if prev is not None and val > prev + 1e-12 * abs(prev):
                    eta *= 0.5
                    halvings += 1
                prev = val
                losses.append(val)
                c_hat = np.asarray(c_hat - eta * np.asarray(g))
        a, res = forward(f, z, t, c_hat)
        a_ref, _ = forward(f, z, t, c0)
        steps.append((mass(a, ne), float(np.linalg.norm(np.asarray(a)[:, pe] - np.asarray(a_ref)[:, pe]))))
        z = z - np.asarray(res) / T
    return steps, halvings, losses


def main():
    f = load(sys.argv[1])
    T = f["timesteps"]
    ne = f["ne_indices"]
    a0, _ = forward(f, f["latent"], T, f["embeddings"])
    base, _, _ = run(f, gamma=0.0, cutoff=0)
    main_run, halvings, losses = run(f)
    ablation, _, _ = run(f, pl=0.0)
    sweep = []
    for g in (0.0, 0.5, 1.0, 2.0, 1e6):
        a, _ = forward(f, f["latent"], T, regularize(f, f["embeddings"], g))
        sweep.append(mass(a, ne))
    out = {
        "initial_ne_mass": mass(a0, ne),
        "baseline_ne_mass": base[19][0],
        "suppressed_ne_mass": main_run[19][0],
        "pe_deviation": main_run[19][1],
        "ablation_pe_deviation": ablation[19][1],
        "eta_halvings": halvings,
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "gamma_sweep_ne_mass": sweep,
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
