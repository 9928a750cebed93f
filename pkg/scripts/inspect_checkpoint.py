"""Per-class error and uncertainty breakdown of a trained checkpoint.

    python3 scripts/inspect_checkpoint.py runs/exp0 [--index 0] [--T 50]

Uses the run's ``run_config.json`` to regenerate a validation phantom with its
labels, then prints, per class and split into interior/edge pixels, the MC-mean
error, bias, predicted aleatoric variance, true noise variance and epistemic
variance.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from scibilic import unet
from scibilic.config import load_config
from scibilic.inference import McConfig, mc_predict
from scibilic.phantom import CLASSES, build_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("run")
    p.add_argument("--index", type=int, default=0, help="validation phantom index")
    p.add_argument("--T", type=int, default=50)
    args = p.parse_args(argv)
    run = Path(args.run)
    cfg = load_config(run / "run_config.json")
    weights, model_cfg, _ = unet.load_checkpoint(run / "checkpoint")
    _, phantoms = build_dataset(cfg.data.n_train, cfg.data.n_val, cfg.data.phantom, cfg.seed, return_phantoms=True)
    ph = phantoms[cfg.data.n_train + args.index]
    out = mc_predict(weights, ph.input.data, McConfig(T=args.T, seed=cfg.seed), model_cfg)
    edge = ndimage.morphological_gradient(ph.labels, size=3) > 0
    err = out.mean - ph.clean_target
    print(f"{'class':10s} {'part':4s} {'n':>5s} {'mse':>8s} {'bias':>7s} {'alea':>8s} {'true':>8s} {'epi':>9s}")
    for k, name in enumerate(CLASSES):
        for part, mask in (("int", (ph.labels == k) & ~edge), ("edge", (ph.labels == k) & edge)):
            if not mask.any():
                continue
            print(f"{name:10s} {part:4s} {mask.sum():5d} {np.mean(err[mask] ** 2):8.4f} {err[mask].mean():+7.3f} "
                  f"{out.aleatoric[mask].mean():8.4f} {np.mean(ph.noise_std[mask] ** 2):8.4f} "
                  f"{out.epistemic[mask].mean():9.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
