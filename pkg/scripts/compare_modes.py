"""Train each input-feeding mode on the default synonym task and report valid BLEU.

    python3 scripts/compare_modes.py --modes teacher_forcing mweam weam --seeds 0
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field

from weam.experiments import ToyConfig, train_toy


@dataclass
class CompareConfig:
    modes: list[str] = field(default_factory=lambda: ["teacher_forcing", "mweam", "weam"])
    seeds: list[int] = field(default_factory=lambda: [0])
    toy: ToyConfig = field(default_factory=ToyConfig)


def run(cfg: CompareConfig) -> list[tuple[str, int, float, float]]:
    rows = []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            out = train_toy(cfg.toy, mode, seed)
            rows.append((mode, seed, out.valid_bleu, out.seconds))
            print(f"mode={mode} seed={seed} valid_bleu={out.valid_bleu:.2f} seconds={out.seconds:.0f}", flush=True)
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--modes", nargs="+", default=CompareConfig().modes)
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--epochs", type=int, default=None)
    args = p.parse_args(argv)
    cfg = CompareConfig(modes=args.modes, seeds=args.seeds)
    if args.epochs is not None:
        cfg.toy.run.epochs = args.epochs
    run(cfg)


if __name__ == "__main__":
    main()
