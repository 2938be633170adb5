#!/usr/bin/env python3
"""Compare the compiled kernel backend against the numpy fallback.

Two levels:
  * kernel micro-benchmarks - both backend modules imported side by side;
  * end-to-end training-step timings - one subprocess per backend, because
    the backend is chosen at import time (MWPSOLVE_BACKEND=py|c).

Usage: python benchmarks/bench_backends.py [--full] [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time
from timeit import repeat as timeit_repeat

import numpy as np


def _time(fn, number, repeats=5):
    return min(timeit_repeat(fn, number=number, repeat=repeats)) / number


def kernel_rows(dims, repeats):
    from mwpsolve.backend import numpy_kernels
    try:
        from mwpsolve.backend import _ckernels
    except ImportError:
        _ckernels = None

    rng = np.random.default_rng(0)
    rows = []
    for hid, inp_dim in dims:
        x = rng.normal(size=inp_dim)
        h = rng.normal(size=hid)
        gru_args = []
        for _ in range(3):
            gru_args += [rng.normal(size=(hid, inp_dim)), rng.normal(size=(hid, hid)),
                         rng.normal(size=hid)]
        w = rng.normal(size=(hid, inp_dim))
        b = rng.normal(size=hid)
        g = rng.normal(size=hid)
        logits = rng.normal(size=hid)
        mask = np.ones(hid, dtype=np.uint8)
        mask[hid // 2:] = 0

        cases = {
            f"gru_cell {hid}x{inp_dim}":
                lambda K: K.gru_cell(x, h, *gru_args),
            f"gru_cell_bwd {hid}x{inp_dim}":
                None,  # filled below; needs forward intermediates
            f"linear {hid}x{inp_dim}":
                lambda K: K.linear(w, x, b),
            f"gated_unit {hid}x{inp_dim}":
                lambda K: K.gated_unit(x, w, b, w, b),
            f"masked_softmax {hid}":
                lambda K: K.masked_softmax(logits, mask),
        }

        def make_bwd(K):
            _, z, r, c, rh = K.gru_cell(x, h, *gru_args)
            mats = [gru_args[i] for i in (0, 1, 3, 4, 6, 7)]
            return lambda: K.gru_cell_bwd(g, x, h, *mats, z, r, c, rh)

        number = max(1, int(20000 / hid))
        for name, call in cases.items():
            row = {"kernel": name, "n": number}
            for label, K in (("numpy", numpy_kernels), ("compiled", _ckernels)):
                if K is None:
                    row[label] = None
                    continue
                fn = make_bwd(K) if call is None else (lambda K=K, c=call: c(K))
                row[label] = _time(fn, number, repeats)
            rows.append(row)
    return rows


END_TO_END = r"""
import json, time
import numpy as np
from mwpsolve.backend import BACKEND_NAME
from mwpsolve.corpus import PreprocessConfig, build_vocab, preprocess_corpus
from mwpsolve.search import SearchBudget
from mwpsolve.synthetic import make_corpus
from mwpsolve.training import TrainConfig, prepare_instances, train_warm

emb, hid, n, epochs = json.loads(%r)
pre = PreprocessConfig()
pairs = preprocess_corpus(make_corpus(n, 7, depth2_fraction=0.6), pre)
vocab = build_vocab(pp for _, pp in pairs)
instances, _ = prepare_instances(pairs, vocab, pre, capacity=32)
cfg = TrainConfig(epochs=epochs, batch_size=32, learning_rate=1e-3, dropout=0.5,
                  beam_width=5, embedding_dim=emb, hidden_dim=hid, seed=0)
t0 = time.time()
train_warm(instances, [], vocab, cfg, SearchBudget(t_max=5, beam_width=5))
dt = time.time() - t0
print(json.dumps({"backend": BACKEND_NAME,
                  "instance_epochs_per_s": n * epochs / dt, "seconds": dt}))
"""


def end_to_end(emb, hid, n, epochs):
    rows = []
    for backend in ("py", "c"):
        env = dict(os.environ, MWPSOLVE_BACKEND=backend)
        script = END_TO_END % json.dumps([emb, hid, n, epochs])
        proc = subprocess.run([sys.executable, "-c", script], env=env,
                              capture_output=True, text=True)
        if proc.returncode != 0:
            rows.append({"backend": backend, "error": proc.stderr.strip()[-200:]})
            continue
        rows.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--full", action="store_true",
                        help="also benchmark the 128/512 production dims")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    dims = [(64, 33)]
    if args.full:
        dims.append((512, 129))

    print("== kernel micro-benchmarks (seconds per call; lower is better) ==")
    for row in kernel_rows(dims, args.repeat):
        numpy_t = row["numpy"]
        comp_t = row["compiled"]
        speedup = f"{numpy_t / comp_t:5.1f}x" if comp_t else "   --"
        comp_s = f"{comp_t * 1e6:9.2f}" if comp_t else "  missing"
        print(f"{row['kernel']:<28} numpy {numpy_t * 1e6:9.2f} us"
              f"   compiled {comp_s} us   speedup {speedup}")

    print("\n== end-to-end training (toy model, 60 instances x 3 epochs) ==")
    for row in end_to_end(32, 64, 60, 3):
        if "error" in row:
            print(f"{row['backend']}: FAILED {row['error']}")
        else:
            print(f"{row['backend']:<8} {row['seconds']:7.2f} s "
                  f"({row['instance_epochs_per_s']:7.1f} instance-epochs/s)")

    if args.full:
        print("\n== end-to-end training (128/512 model, 8 instances x 1 epoch) ==")
        for row in end_to_end(128, 512, 8, 1):
            if "error" in row:
                print(f"{row['backend']}: FAILED {row['error']}")
            else:
                print(f"{row['backend']:<8} {row['seconds']:7.2f} s "
                      f"({row['instance_epochs_per_s']:7.1f} instance-epochs/s)")


if __name__ == "__main__":
    main()
