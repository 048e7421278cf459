"""Writes vgg_narrow.safetensors: narrow VGG-16 conv1-conv3 weights in
torchvision naming, an input image, torch's concatenated relu3_x features and
the input gradient of <features, probe>."""
import torch
import torch.nn as nn
from safetensors.torch import save_file

torch.manual_seed(7)
widths = [4, 6, 8]
layers = []
cin = 3
names = [0, 2, 5, 7, 10, 12, 14]
shapes = [(3, widths[0]), (widths[0], widths[0]), (widths[0], widths[1]),
          (widths[1], widths[1]), (widths[1], widths[2]), (widths[2], widths[2]),
          (widths[2], widths[2])]
convs = [nn.Conv2d(a, b, 3, padding=1) for a, b in shapes]
for c in convs:
    nn.init.uniform_(c.bias, -0.1, 0.1)

mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

H, W = 18, 22
img = torch.rand(H, W, 3, dtype=torch.float32)
x = img.permute(2, 0, 1).unsqueeze(0).clone().requires_grad_(True)
h = (x - mean) / std
r = torch.relu
h = r(convs[0](h)); h = r(convs[1](h)); h = nn.functional.max_pool2d(h, 2)
h = r(convs[2](h)); h = r(convs[3](h)); h = nn.functional.max_pool2d(h, 2)
f1 = r(convs[4](h)); f2 = r(convs[5](f1)); f3 = r(convs[6](f2))
feat = torch.cat([f1, f2, f3], dim=1)[0].permute(1, 2, 0).contiguous()
probe = torch.randn_like(feat)
(feat * probe).sum().backward()

out = {"input": img, "expected": feat.detach(), "probe": probe,
       "input_grad": x.grad[0].permute(1, 2, 0).contiguous()}
for n, c in zip(names, convs):
    out[f"features.{n}.weight"] = c.weight.detach().contiguous()
    out[f"features.{n}.bias"] = c.bias.detach().contiguous()
save_file(out, "vgg_narrow.safetensors")
print(feat.shape)
