# # Non-IID MNIST: FedAvg against the elastic objective
#
# Ten clients each see only two digits. FedAvg averages models that were each
# pulled toward two classes; the elastic term penalizes moving weights that
# other clients found important (high Fisher information), which damps that
# tug-of-war.
#
# Runs a couple of minutes on a laptop. Pass a number to change the round count.

import sys
from pathlib import Path

import numpy as np

from elasticfl import data as D
from elasticfl.fedcore import HyperParams, LRSchedule, RunConfig, run_rounds
from elasticfl.models import ModelSpec
from elasticfl.numkit import stream

T = int(sys.argv[1]) if len(sys.argv) > 1 else 100
root = Path(__file__).resolve().parent.parent / "data" / "mnist5k"
mnist = D.load_idx(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz")

# 200 images per digit, split so that every client holds exactly two digits.

seed = 0
subset = D.subset_per_class(mnist, 200, stream(seed, purpose="subset"))
fed = D.partition_by_classes(subset, 10, 2, stream(seed, purpose="partition"), 0.2, class_count=10)
for k, c in enumerate(fed.clients[:3]):
    print(f"client {k}: digits {sorted(set(c.train.labels.tolist()))}, {len(c.train)} training images")

spec = ModelSpec("softmax-regression", 784, 10)


def curve(**hp):
    cfg = RunConfig(spec, fed, HyperParams(T=T, E=5, B=32, lr=LRSchedule("constant", 0.1), coeff="static", **hp),
                    seed=seed, eval_every=10)
    return run_rounds(cfg)


runs = {
    "FedAvg, dense": curve(algorithm="fedavg", q_up=None, q_down=None),
    "EFL lam=0, q=0.05": curve(lam=0.0),
    "EFL lam=0.1, q=0.05": curve(lam=0.1),
}

# Mean per-client test accuracy every ten rounds, plus what was sent upstream.

print("round " + "".join(f"{name:>22}" for name in runs))
for i, row in enumerate(next(iter(runs.values()))):
    print(f"{row.round:5d} " + "".join(f"{r[i].test_acc_mean:>22.4f}" for r in runs.values()))
for name, rows in runs.items():
    print(f"{name:>22}: {sum(r.bits_up for r in rows) / 8e6:.2f} MB upstream (sampled rounds)")

# The compressed runs land within a point of the dense baseline while sending
# a few percent of the bits.
