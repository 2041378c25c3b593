"""Time the compiled and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is checked for agreement between backends before timing. The
last row times one full training step of the default CLI model.
"""
import argparse
import json
import timeit

import numpy as np

from cer import corpus as C
from cer import kernels
from cer import model as M
from cer import training as Tr
from cer.tensor import FORBIDDEN, Tape


def kernel_cases(rng):
    B, H, L, d = 64, 2, 21, 32
    scores = rng.normal(size=(B, H, L, L))
    mask = np.triu(np.full((L, L), FORBIDDEN), 1)
    y = kernels.softmax_forward(scores, mask)
    g = rng.normal(size=scores.shape)
    x = rng.normal(size=(B * L, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    _, xhat, rstd = kernels.layernorm_forward(x, gamma, beta, 1e-5)
    gx = rng.normal(size=x.shape)
    X = rng.normal(size=(B, L, d))
    starts = rng.integers(2, 5, B).astype(np.int64)
    lengths = rng.integers(1, L - 5, B).astype(np.int64)
    return {
        "softmax_forward": lambda: kernels.softmax_forward(scores, mask),
        "softmax_backward": lambda: kernels.softmax_backward(y, g),
        "layernorm_forward": lambda: kernels.layernorm_forward(x, gamma, beta, 1e-5),
        "layernorm_backward": lambda: kernels.layernorm_backward(gx, xhat, rstd, gamma),
        "segment_max_forward": lambda: kernels.segment_max_forward(X, starts, lengths),
    }


def training_step(lexicon):
    recs = C.synthesize_corpus(seed=0, n_users=50, n_items=50, n_records=64, lexicon=lexicon)
    vocab = C.build_vocab(recs)
    config = M.config_for_vocab(vocab, embed_dim=32, n_layers=2, n_heads=2, hidden_dim=32, ffn_dim=64,
                                max_expl_len=16, max_features=2)
    params = M.init_params(config, 0)
    batch = Tr.make_batch(Tr.encode_records(recs, vocab, config))
    opt = Tr.Adam(params, lr=0.0)

    def step():
        with Tape() as tape:
            _, total = Tr.joint_loss(batch, params, config)
        tape.backward(total)
        opt.step()
    return step


def _outputs(fn):
    out = fn()
    return out if isinstance(out, tuple) else (out,)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; run `python3 setup.py build_ext --inplace` first")
    lexicon = C.load_lexicon()
    timings: dict[str, dict[str, float]] = {}
    reference = {}
    for backend in backends:
        kernels.set_backend(backend)
        cases = kernel_cases(np.random.default_rng(0))
        cases["training_step"] = training_step(lexicon)
        for name, fn in cases.items():
            if name != "training_step":
                outs = _outputs(fn)
                if name in reference:
                    for a, b in zip(reference[name], outs):
                        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
                else:
                    reference[name] = outs
            number = max(1, args.number // 10) if name == "training_step" else args.number
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            timings.setdefault(name, {})[backend] = best

    head = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if len(backends) > 1:
        head += f"{'speedup':>10}"
    print(head)
    for name, row in timings.items():
        line = f"{name:<22}" + "".join(f"{1e3 * row[b]:>16.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(timings, fh, indent=2)


if __name__ == "__main__":
    main()
