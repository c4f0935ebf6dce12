#!/usr/bin/env python3
"""Convert torchvision ImageNet weights into an imcx weight archive (IMCXW001).

Usage: export_pretrained.py {vgg16,resnet50} OUTPUT [--state-dict FILE]

Without --state-dict the weights are fetched through torchvision. Tensor names are
kept as-is; imcx layer names follow torchvision, and tensors whose shape does not
match (the 1000-class heads) are ignored when the archive is applied.
"""

import argparse
import struct
import sys

MAGIC = b"IMCXW001"


def load_state_dict(arch, path):
    import torch

    if path:
        return torch.load(path, map_location="cpu")
    import torchvision

    builders = {
        "vgg16": (torchvision.models.vgg16, "VGG16_Weights"),
        "resnet50": (torchvision.models.resnet50, "ResNet50_Weights"),
    }
    build, weights = builders[arch]
    return build(weights=getattr(torchvision.models, weights).IMAGENET1K_V1).state_dict()


def write_archive(state, out):
    entries = [(k, v) for k, v in sorted(state.items()) if not k.endswith("num_batches_tracked")]
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(entries)))
        for name, tensor in entries:
            values = tensor.detach().to("cpu").double().contiguous().view(-1).tolist()
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", tensor.dim()))
            f.write(struct.pack("<%di" % tensor.dim(), *tensor.shape))
            f.write(struct.pack("<Q", len(values)))
            f.write(struct.pack("<%dd" % len(values), *values))
    return len(entries)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("arch", choices=["vgg16", "resnet50"])
    parser.add_argument("output")
    parser.add_argument("--state-dict", help="local torch state_dict file instead of downloading")
    args = parser.parse_args()
    count = write_archive(load_state_dict(args.arch, args.state_dict), args.output)
    print(f"wrote {count} tensors to {args.output}", file=sys.stderr)


if __name__ == "__main__":
    main()
