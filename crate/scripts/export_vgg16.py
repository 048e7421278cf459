"""Exports the conv1-conv3 parameters of torchvision's pretrained VGG-16 to a
safetensors file and prints its SHA-256 for pinning in the run config.

usage: python export_vgg16.py OUT.safetensors [CHECKPOINT.pth]
"""
import hashlib
import sys

import torch
import torchvision
from safetensors.torch import save_file

out = sys.argv[1]
if len(sys.argv) > 2:
    state = torch.load(sys.argv[2], map_location="cpu")
else:
    state = torchvision.models.vgg16(weights="IMAGENET1K_V1").state_dict()
keep = {k: v.contiguous().float() for k, v in state.items()
        if k.startswith("features.") and int(k.split(".")[1]) <= 14}
save_file(keep, out)
print(hashlib.sha256(open(out, "rb").read()).hexdigest())
