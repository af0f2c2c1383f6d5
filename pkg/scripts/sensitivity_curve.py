"""BLEU versus decoder-input noise for teacher forcing and M-WEAM, averaged over seeds.

    python3 scripts/sensitivity_curve.py --seeds 0 1 2 --out curve.csv
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field

import numpy as np

from weam.evaluation import parse_sigmas
from weam.experiments import ToyConfig, sensitivity, train_toy


@dataclass
class CurveConfig:
    modes: list[str] = field(default_factory=lambda: ["teacher_forcing", "mweam"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sigmas: str = "0:1:0.1"
    toy: ToyConfig = field(default_factory=ToyConfig)


def run(cfg: CurveConfig) -> dict[str, np.ndarray]:
    sigmas = parse_sigmas(cfg.sigmas)
    curves = {}
    for mode in cfg.modes:
        per_seed = []
        for seed in cfg.seeds:
            curve = sensitivity(train_toy(cfg.toy, mode, seed), sigmas)
            per_seed.append([b for _, b in curve])
            print(f"mode={mode} seed={seed} " + " ".join(f"{s:.2f}:{b:.2f}" for s, b in curve), flush=True)
        curves[mode] = np.mean(per_seed, axis=0)
    return curves


def to_csv(sigmas, curves) -> str:
    modes = list(curves)
    rows = ["sigma," + ",".join(modes)]
    rows += [f"{s:.2f}," + ",".join(f"{curves[m][i]:.4f}" for m in modes) for i, s in enumerate(sigmas)]
    return "\n".join(rows) + "\n"


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--sigmas", default="0:1:0.1")
    p.add_argument("--out", default="sensitivity_curve.csv")
    args = p.parse_args(argv)
    cfg = CurveConfig(seeds=args.seeds, sigmas=args.sigmas)
    curves = run(cfg)
    text = to_csv(parse_sigmas(cfg.sigmas), curves)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


if __name__ == "__main__":
    main()
