#!/usr/bin/env python3
"""Render a checkpoint's prediction for one image from four azimuths and
assemble a single contact-sheet PNG (input | 0 | 90 | 180 | 270).

Usage: python scripts/turntable.py --config run/config.txt \
           --checkpoint run/checkpoint_last.saor --image img.png --out sheet.png
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from saor import autodiff as ad  # noqa: E402
from saor import data as D  # noqa: E402
from saor.autodiff import Tensor  # noqa: E402
from saor.config import load_config  # noqa: E402
from saor.losses import PerceptualPyramid  # noqa: E402
from saor.networks import SaorModel  # noqa: E402
from saor.optim import load_checkpoint  # noqa: E402
from saor.render import CameraPose, render  # noqa: E402
from saor.training import forward_sample  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    cfg = load_config(args.config)
    model = SaorModel(cfg.model, seed=cfg.seed)
    PerceptualPyramid(model.store, seed=cfg.seed + 1)
    load_checkpoint(model.store, args.checkpoint)

    s = cfg.model.image_size
    img = D.read_image(args.image)
    if img.shape[1:] != (s, s):
        img = D.bilinear_resize_np(img, s, s)
    with ad.no_grad():
        fwd = forward_sample(model, img, cfg.render, s)
        base = fwd.pose.as_floats()
        panels = [img]
        for off in (0, 90, 180, 270):
            azim = (float(base[0]) + off + 180.0) % 360.0 - 180.0
            pose = CameraPose(azimuth=azim, elevation=float(base[1]),
                              roll=float(base[2]), translation=base[3:6])
            view = render(Tensor(fwd.shape.data), Tensor(fwd.texture.data),
                          pose, model.mesh, cfg.render, s, s)
            panels.append(view.rgb.data)
    sheet = np.concatenate(panels, axis=2)
    D.write_image(args.out, sheet)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
