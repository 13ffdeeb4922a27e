"""Train the tiny EMBA preset on synthetic blobs and write its metrics.

    python3 scripts/toy_training.py [--epochs 20] [--out runs/toy]
"""

import argparse
import sys
from pathlib import Path

from embanet.checkpoint import save_checkpoint
from embanet.data import DatasetSource, SyntheticBlobs
from embanet.network import build_network
from embanet.train import ConstantLR, TrainConfig, train, write_history_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args(argv)

    source = DatasetSource(SyntheticBlobs(classes=4, side=16, samples=512, seed=args.seed))
    net = build_network("tiny-emba", seed=args.seed)
    held_out = source.load("test")
    hist = train(net, source, ConstantLR(args.lr), TrainConfig(epochs=args.epochs, batch=64, seed=args.seed),
                 eval_data=held_out,
                 on_epoch=lambda m: print(f"epoch {m.epoch:2d}  loss {m.train_loss:.4f}  "
                                          f"train {m.train_acc:.3f}  test {m.eval_acc:.3f}", flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(hist, out / "metrics.csv")
    save_checkpoint(net, out / "checkpoint", seed=args.seed)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
