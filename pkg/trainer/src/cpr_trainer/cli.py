"""Command line for the training sidecar."""

from __future__ import annotations

import argparse
import json
import sys

from .config import TrainerConfig
from .train import project_images, train_lrb


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cpr-train")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the local metric and export tensors")
    p_train.add_argument("--images", required=True, help="directory of normal images")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", help="JSON file of TrainerConfig fields")
    p_train.add_argument("--iterations", type=int, default=None)
    p_train.add_argument("--out-dim", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--backbone", choices=("densenet201", "tiny"), default=None)

    p_project = sub.add_parser("project", help="project images with a checkpoint")
    p_project.add_argument("--checkpoint", required=True)
    p_project.add_argument("--images", required=True)
    p_project.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "train":
        doc = {}
        if args.config:
            doc = json.loads(open(args.config).read())
        if args.iterations is not None:
            doc["iterations"] = args.iterations
        if args.out_dim is not None:
            doc["out_dim"] = args.out_dim
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.backbone is not None:
            doc["backbone"] = {"name": args.backbone}
        config = TrainerConfig(**doc)
        result = train_lrb(args.images, config, args.out)
        print(
            json.dumps(
                {
                    "checkpoint": str(result.checkpoint_path),
                    "export_manifest": str(result.export_manifest),
                    "log": str(result.log_path),
                    "final_loss": result.loss_curve[-1] if result.loss_curve else None,
                }
            )
        )
        return 0
    manifest = project_images(args.checkpoint, args.images, args.out)
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
