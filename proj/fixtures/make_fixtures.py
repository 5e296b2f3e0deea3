"""Regenerates the 64x64 PNG fixtures. Output is deterministic."""

import pathlib

import numpy as np
from PIL import Image

SIZE = 64
ROOT = pathlib.Path(__file__).resolve().parent


def grid():
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return y, x


def save(arr, rel):
    path = ROOT / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(path, optimize=False)


def blob_masks():
    y, x = grid()
    wings = []
    for cx, cy in ((22, 24), (42, 24), (24, 42), (40, 42)):
        wings.append(((x - cx) / 11.0) ** 2 + ((y - cy) / 9.0) ** 2 <= 1.0)
    body = (np.abs(x - 32) <= 2.5) & (np.abs(y - 33) <= 15)
    return wings, body


def embroidery():
    y, x = grid()
    # Linen background: fine cross weave.
    weave = 0.06 * np.sign(np.sin(np.pi * x / 1.5)) * np.sign(np.sin(np.pi * y / 1.5))
    img = np.empty((SIZE, SIZE, 3))
    img[...] = np.array([0.86, 0.82, 0.72])
    img += weave[..., None]
    wings, body = blob_masks()
    colors = [(0.85, 0.25, 0.30), (0.20, 0.45, 0.80), (0.95, 0.70, 0.20), (0.30, 0.70, 0.40)]
    for mask, color in zip(wings, colors):
        # Satin stitch: diagonal threads with a highlight on every other thread.
        stitch = 0.5 + 0.5 * np.sign(np.sin(np.pi * (x + y) / 2.0))
        shade = 0.75 + 0.35 * stitch
        img[mask] = (np.array(color)[None, :] * shade[mask][:, None])
    # Body in dark running stitch.
    dash = (np.floor(y / 2) % 2 == 0)
    img[body] = np.where(dash[body][:, None], [0.15, 0.12, 0.10], [0.35, 0.30, 0.25])
    # Outline stitch around the wings.
    for mask in wings:
        edge = mask & ~(np.roll(mask, 1, 0) & np.roll(mask, -1, 0) & np.roll(mask, 1, 1) & np.roll(mask, -1, 1))
        img[edge] = [0.10, 0.08, 0.08]
    return np.clip(img, 0.0, 1.0)


def design_flower():
    y, x = grid()
    img = np.ones((SIZE, SIZE, 3))
    img[...] = [0.97, 0.96, 0.92]
    for k in range(6):
        a = 2 * np.pi * k / 6
        cx, cy = 32 + 14 * np.cos(a), 32 + 14 * np.sin(a)
        img[(x - cx) ** 2 + (y - cy) ** 2 <= 64] = [0.90, 0.35, 0.55]
    img[(x - 32) ** 2 + (y - 32) ** 2 <= 49] = [0.98, 0.80, 0.20]
    return img


def design_bird():
    y, x = grid()
    img = np.ones((SIZE, SIZE, 3))
    img[...] = [0.85, 0.93, 0.98]
    img[((x - 30) / 16.0) ** 2 + ((y - 36) / 11.0) ** 2 <= 1.0] = [0.20, 0.40, 0.85]
    img[(x - 44) ** 2 + (y - 26) ** 2 <= 42] = [0.20, 0.40, 0.85]
    img[(np.abs(y - 26) <= 2) & (x >= 50) & (x <= 57) & (np.abs(y - 26) <= (57 - x) / 3.5)] = [0.95, 0.60, 0.10]
    img[(x - 46) ** 2 + (y - 24) ** 2 <= 2] = [0.05, 0.05, 0.05]
    return img


def main():
    save(embroidery(), "references/butterfly.png")
    save(design_flower(), "inputs/flower.png")
    save(design_bird(), "inputs/bird.png")


if __name__ == "__main__":
    main()
