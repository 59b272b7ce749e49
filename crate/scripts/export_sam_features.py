#!/usr/bin/env python3
"""Export SAM ViT-B image-encoder grids for a scene in segfield's feature
file format, so `segfield ... --backend sam` can ingest them.

Requires torch + the HuggingFace `transformers` package (SamModel); run it on
any machine with the model weights available, then copy the output directory
next to the scene (default: <scene>/sam_features).

  python scripts/export_sam_features.py --scene scenes/toy [--out DIR]
                                        [--model facebook/sam-vit-base]
"""

import argparse
import hashlib
import json
import struct
from pathlib import Path


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def image_content_hash(img) -> int:
    import numpy as np

    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    payload = (
        struct.pack("<I", arr.shape[1])
        + struct.pack("<I", arr.shape[0])
        + arr.tobytes()
    )
    return fnv1a64(payload)


def write_feature_file(path: Path, grid, backend_id: str, width: int, height: int):
    import numpy as np

    grid = np.ascontiguousarray(grid, dtype="<f4")
    h_f, w_f, d = grid.shape
    checksum = fnv1a64(grid.tobytes())
    header = json.dumps(
        {
            "backend_id": backend_id,
            "feature_dim": d,
            "h_f": h_f,
            "w_f": w_f,
            "source_width": width,
            "source_height": height,
            "checksum": checksum,
        },
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(b"SFC1")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(grid.tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", required=True, type=Path)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--model", default="facebook/sam-vit-base")
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args()

    import torch
    from PIL import Image
    from transformers import SamModel, SamProcessor

    out_dir = args.out or args.scene / "sam_features"
    out_dir.mkdir(parents=True, exist_ok=True)

    processor = SamProcessor.from_pretrained(args.model)
    model = SamModel.from_pretrained(args.model).to(args.device).eval()

    images = sorted((args.scene / "images").glob("*.png"))
    if not images:
        raise SystemExit(f"no images under {args.scene}/images")
    for img_path in images:
        img = Image.open(img_path).convert("RGB")
        inputs = processor(images=img, return_tensors="pt").to(args.device)
        with torch.no_grad():
            embeddings = model.get_image_embeddings(inputs["pixel_values"])
        # (1, 256, 64, 64) -> (64, 64, 256)
        grid = embeddings[0].permute(1, 2, 0).cpu().numpy()
        content_hash = image_content_hash(img)
        out_path = out_dir / f"sam-vit-b-{content_hash:016x}.sfc"
        write_feature_file(out_path, grid, "sam-vit-b", img.width, img.height)
        print(f"{img_path.name} -> {out_path.name} {grid.shape}")


if __name__ == "__main__":
    main()
