#!/usr/bin/env python3
"""Convert torchvision ResNet34 weights into an hgpose encoder checkpoint.

The output is a standard `.hgp` container (8-byte little-endian header
length, JSON header, raw little-endian float32 payload) holding only
`encoder.*` tensors, suitable for `hgpose train --pretrained <file>`.

Usage:
    python scripts/convert_resnet34.py --out resnet34_encoder.hgp
    python scripts/convert_resnet34.py --state-dict resnet34.pth --out resnet34_encoder.hgp

Without --state-dict the weights are downloaded through torchvision
(requires network access and torch/torchvision installed).
"""

import argparse
import json
import struct
import sys

import numpy as np


def torch_state_dict(path):
    import torch

    if path:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
    else:
        from torchvision.models import ResNet34_Weights, resnet34

        state = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1).state_dict()
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def rename(torch_name):
    """Map torchvision parameter names onto hgpose encoder names."""
    if torch_name.startswith("fc."):
        return None  # classification head is not part of the encoder
    if torch_name.endswith("num_batches_tracked"):
        return None
    simple = {
        "conv1.weight": "encoder.stem.conv.weight",
        "bn1.weight": "encoder.stem.bn.weight",
        "bn1.bias": "encoder.stem.bn.bias",
        "bn1.running_mean": "encoder.stem.bn.running_mean",
        "bn1.running_var": "encoder.stem.bn.running_var",
    }
    if torch_name in simple:
        return simple[torch_name]
    # layer<s>.<b>.<rest>
    parts = torch_name.split(".")
    if parts[0].startswith("layer"):
        stage = int(parts[0][len("layer"):])
        block = parts[1]
        rest = parts[2:]
        prefix = f"encoder.resblock{stage}.{block}"
        if rest[0] == "downsample":
            sub = {"0": "downsample.conv", "1": "downsample.bn"}[rest[1]]
            return f"{prefix}.{sub}.{'.'.join(rest[2:])}"
        return f"{prefix}.{'.'.join(rest)}"
    raise KeyError(f"unmapped tensor {torch_name}")


def default_config():
    return {
        "variant": "sum",
        "input_hw": [224, 224],
        "encoder_channels": [64, 64, 128, 256, 512],
        "encoder_block_counts": [3, 4, 6, 3],
        "decoder_channels": [256, 128, 64],
        "final_conv_channels": 32,
        "regressor_hidden": 2048,
        "dropout_prob": 0.5,
        "width_multiplier": 1.0,
    }


def write_hgp(path, tensors):
    metas = []
    offset = 0
    payload = bytearray()
    for name, array in tensors:
        data = np.ascontiguousarray(array, dtype="<f4")
        raw = data.tobytes()
        metas.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(data.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        payload.extend(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": 1, "config": default_config(), "tensors": metas}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--state-dict", help="local .pth file (otherwise torchvision downloads)")
    parser.add_argument("--out", required=True, help="output .hgp path")
    args = parser.parse_args()

    state = torch_state_dict(args.state_dict)
    tensors = []
    for torch_name, array in state.items():
        name = rename(torch_name)
        if name is not None:
            tensors.append((name, array))
    tensors.sort(key=lambda kv: kv[0])
    write_hgp(args.out, tensors)
    total = sum(int(np.prod(a.shape)) for _, a in tensors)
    print(f"wrote {len(tensors)} tensors ({total} scalars) to {args.out}")


if __name__ == "__main__":
    sys.exit(main())
