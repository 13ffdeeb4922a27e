"""Toy ablation over branch count and recalibration on synthetic blobs.

Each row swaps one knob of the tiny preset through spec overrides and
trains a few epochs.  The data is far easier than ImageNet, so this only
shows that every variant builds and learns; it says nothing about which
variant wins at scale.

    python3 scripts/recalibration_ablation.py [--epochs 5]
"""

import argparse
import sys

from embanet.complexity import count_complexity
from embanet.data import DatasetSource, SyntheticBlobs
from embanet.network import apply_overrides, build_network, preset
from embanet.train import ConstantLR, TrainConfig, evaluate, train

VARIANTS = {
    "split S=4 softmax": [],
    "split S=4 sigmoid": ["block.recal=sigmoid"],
    "multiplex S=4 softmax": ["block.mbc.operator=multiplex"],
    "split S=2 softmax": ["block.mbc.s=2"],
    "split S=1 sigmoid": ["block.mbc.s=1", "block.recal=sigmoid"],
    "split S=4 eca": ["block.attention.variant=eca"],
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--noise", type=float, default=2.0, help="harder than the smoke-test default")
    args = ap.parse_args(argv)
    source = DatasetSource(SyntheticBlobs(samples=args.samples, noise=args.noise))
    x_test, y_test = source.load("test")
    print(f"{'variant':<24} {'params':>7} {'loss':>7} {'train':>6} {'test':>6}")
    for label, overrides in VARIANTS.items():
        spec = apply_overrides(preset("tiny-emba"), overrides)
        net = build_network(spec, seed=0)
        params = count_complexity(net, (1, 3, 16, 16)).total_params
        hist = train(net, source, ConstantLR(0.05), TrainConfig(epochs=args.epochs, batch=64))
        test_acc = evaluate(net, x_test, y_test)
        print(f"{label:<24} {params:>7d} {hist[-1].train_loss:>7.4f} {hist[-1].train_acc:>6.3f} {test_acc:>6.3f}",
              flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
