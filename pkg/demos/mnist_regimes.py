"""
Four ways to train on noisy MNIST
=================================

Trains 60-unit ReLU networks on a 10000-image subset with regular learning,
singular-value clipping, the covariance-estimate regulariser and the
norm-bound regulariser, three seeds each, then sweeps the input noise level.

Runs are cached under results/study (the acceptance suite reads the same
cache), so a second invocation only prints. A cold run takes a few hours on
one core.

    python demos/mnist_regimes.py [MNIST_DIR]
"""
import sys
from pathlib import Path

from robust_rnn.data import load_idx, subset
from robust_rnn.study import REGIMES, StudySpec, run_study

mnist = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/data/mnist")
cache = Path(__file__).resolve().parents[1] / "results" / "study"

train_set, _ = subset(load_idx(mnist / "train-images-idx3-ubyte", mnist / "train-labels-idx1-ubyte"), 10_000, 0)
test_set, _ = subset(load_idx(mnist / "t10k-images-idx3-ubyte", mnist / "t10k-labels-idx1-ubyte", "test"), 2_000, 1)

study = run_study(StudySpec(), train_set, test_set, cache, log=print)

print(f"\n{'regime':12s} {'clean acc':>9s} {'||A||':>7s} {'err @ w=1':>9s} {'w @ 5%':>8s}")
for r in REGIMES:
    print(
        f"{r:12s} {100 * study.mean_clean_accuracy(r):8.2f}% {study.mean_norm_a(r):7.3f} "
        f"{study.at_omega(r, 1.0):8.2f}% {study.threshold(r):8.4f}"
    )

print("\nmisclassification (%) by noise amplitude, mean over seeds")
print("omega    " + "".join(f"{r:>12s}" for r in REGIMES))
for k, w in enumerate(study.spec.omegas):
    print(f"{w:<9g}" + "".join(f"{study.mean_curve(r)[k]:12.2f}" for r in REGIMES))
