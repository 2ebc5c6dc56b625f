#!/usr/bin/env python3
"""FLOP total of the reference architecture, summed from its layer table.

Each convolution costs H' * W' * C_in * C_out * k^2, where H' x W' is its
output size. The input is padded up to a multiple of 32 before the forward.
"""

import argparse
import json

# (name, C_out, kernel, stride) in forward order.
ENCODER = [
    ("block1.0", 4, 3, 2), ("block1.1", 4, 3, 1),
    ("block2.0", 8, 3, 2), ("block2.1", 8, 3, 1),
    ("block3.0", 24, 3, 2), ("block3.1", 24, 3, 1), ("block3.2", 24, 3, 1),
    ("block4.0", 64, 3, 2), ("block4.1", 64, 3, 1), ("block4.2", 64, 3, 1),
    ("block5.0", 64, 3, 2), ("block5.1", 64, 3, 1), ("block5.2", 64, 3, 1),
    ("block6.0", 128, 3, 1), ("block6.1", 128, 3, 1), ("block6.2", 128, 3, 1),
]
DESCRIPTOR = 64
FUSION_LAYERS = 2  # basic layers before the output conv
FUSION_KERNEL = 1
KEYPOINT_HIDDEN = 64


def layer_table(width, height):
    h = -(-height // 32) * 32
    w = -(-width // 32) * 32
    rows = []
    c_in = 1
    level = {}
    for name, c_out, k, stride in ENCODER:
        h //= stride
        w //= stride
        rows.append((name, h, w, c_in, c_out, k))
        c_in = c_out
        level[name.split(".")[0]] = (h, w, c_out)
    h8, w8, c8 = level["block3"]
    h16, w16, c16 = level["block4"]
    h32, w32, c32 = level["block6"]
    rows.append(("proj8", h8, w8, c8, DESCRIPTOR, 1))
    rows.append(("proj16", h16, w16, c16, DESCRIPTOR, 1))
    rows.append(("proj32", h32, w32, c32, DESCRIPTOR, 1))
    for i in range(FUSION_LAYERS):
        rows.append((f"fusion.{i}", h8, w8, DESCRIPTOR, DESCRIPTOR, FUSION_KERNEL))
    rows.append(("fusion_out", h8, w8, DESCRIPTOR, DESCRIPTOR, 1))
    rows.append(("reliability", h8, w8, DESCRIPTOR, 1, 1))
    c = 64  # space-to-depth of the 1-channel image by 8
    for i in range(3):
        rows.append((f"keypoint.{i}", h8, w8, c, KEYPOINT_HIDDEN, 1))
        c = KEYPOINT_HIDDEN
    rows.append(("keypoint.3", h8, w8, c, 65, 1))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--width", type=int, default=800)
    parser.add_argument("--height", type=int, default=600)
    args = parser.parse_args()
    rows = layer_table(args.width, args.height)
    total = sum(h * w * ci * co * k * k for _, h, w, ci, co, k in rows)
    print(json.dumps({"width": args.width, "height": args.height, "layers": len(rows), "total": total}))


if __name__ == "__main__":
    main()
