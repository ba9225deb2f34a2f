"""Train the toy network family on clean phantoms and check the robustness ordering.

baseline (plain convs) <= octave convs <= octave + weight averaging <= + post-processing,
in Complete-tumor Dice at noise sigma 0.02 and 0.04.

    python3 demos/trend_experiment.py [epochs] [n_train] [n_val]

Roughly 15-20 minutes on one core at the defaults.  The CLI equivalent:

    tumorseg train-toy --family on --out ck
    tumorseg evaluate --ckpt ck --methods baseline,octconv,octconv+swa,octconv+swa+post \\
        --seeds 2 --out report.json
"""

import sys
import time

from tumorseg import harness as h

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 8
n_val = int(sys.argv[3]) if len(sys.argv) > 3 else 8

t = time.perf_counter()


def log(name, epoch, lr, loss):
    if epoch % 10 == 0 or epoch == epochs - 1:
        print(f"  {name:<8} epoch {epoch:>3}  lr {lr:.4f}  loss {loss:.4f}  "
              f"[{time.perf_counter() - t:.0f} s]", flush=True)


print(f"training on {n_train} clean phantoms for {epochs} epochs")
family = h.train_toy_family(h.make_cases(n_train, seed0=100, prefix="train"), epochs=epochs, log=log)
print(f"\nsweeping {n_val} validation phantoms x 2 noise seeds")
rep = h.robustness_sweep(family.methods, h.make_cases(n_val), [0.0, 0.02, 0.04], [0, 1])
print(rep.table(), "\n")
print(h.trend_check(rep).summary())
print(f"\ntotal {time.perf_counter() - t:.0f} s")
