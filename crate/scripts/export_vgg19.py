#!/usr/bin/env python3
"""Export a VGG-19 feature extractor to ONNX for the pretrained backend.

The exported graph takes a (1, 3, H, W) float input and exposes five
post-activation outputs named relu1_1 .. relu5_1. A manifest sidecar
(<model>.json) records the output names and the input normalization the
weights expect.

Requires torch and torchvision (plus the onnx package for the exporter).

    python3 scripts/export_vgg19.py vgg19.onnx            # torchvision weights
    python3 scripts/export_vgg19.py smoke.onnx --random   # random weights
"""

import argparse
import json

import torch
import torch.nn as nn

# conv layout of the VGG-19 feature prefix up to conv5_1
CFG = [
    (3, 64), (64, 64),
    (64, 128), (128, 128),
    (128, 256), (256, 256), (256, 256), (256, 256),
    (256, 512), (512, 512), (512, 512), (512, 512),
    (512, 512),
]

# indices of the matching conv layers inside torchvision's vgg19().features
TORCHVISION_FEATURE_IDX = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28]


class VggTaps(nn.Module):
    def __init__(self):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, padding=1) for i, o in CFG)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        relu = torch.relu
        c = self.convs
        r1 = relu(c[0](x))
        x = self.pool(relu(c[1](r1)))
        r2 = relu(c[2](x))
        x = self.pool(relu(c[3](r2)))
        r3 = relu(c[4](x))
        x = self.pool(relu(c[7](relu(c[6](relu(c[5](r3)))))))
        r4 = relu(c[8](x))
        x = self.pool(relu(c[11](relu(c[10](relu(c[9](r4)))))))
        r5 = relu(c[12](x))
        return r1, r2, r3, r4, r5


def load_weights(model: VggTaps, random: bool):
    if random:
        torch.manual_seed(0)
        for conv in model.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        return
    from torchvision.models import VGG19_Weights, vgg19

    reference = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    for conv, idx in zip(model.convs, TORCHVISION_FEATURE_IDX):
        conv.weight.data.copy_(reference[idx].weight.data)
        conv.bias.data.copy_(reference[idx].bias.data)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("output", help="path of the .onnx file to write")
    parser.add_argument(
        "--random",
        action="store_true",
        help="seeded random weights instead of torchvision's (no download)",
    )
    args = parser.parse_args()

    model = VggTaps().eval()
    load_weights(model, args.random)

    torch.onnx.export(
        model,
        torch.zeros(1, 3, 256, 256),
        args.output,
        input_names=["input"],
        output_names=["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"],
        dynamic_axes={"input": {2: "height", 3: "width"}},
        opset_version=13,
        dynamo=False,
    )

    manifest = {
        "outputs": ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"],
        "mean": [0.485, 0.456, 0.406],
        "std": [0.229, 0.224, 0.225],
        "input_range": "unit",
    }
    with open(args.output + ".json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    print(f"wrote {args.output} and {args.output}.json")


if __name__ == "__main__":
    main()
