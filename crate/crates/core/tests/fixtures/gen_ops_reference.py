"""Regenerates ops_reference.safetensors with torch/torchvision as the reference.

Usage: python3 gen_ops_reference.py  (requires torch, torchvision, safetensors)
"""
import torch
import torch.nn.functional as F
from safetensors.torch import save_file
from torchvision.ops import deform_conv2d

torch.manual_seed(0)
t = {}
x = torch.randn(2, 3, 7, 6, dtype=torch.float64)
for dil in (1, 2):
    off = 2.5 * torch.randn(2, 18, 7, 6, dtype=torch.float64)
    mask = torch.rand(2, 9, 7, 6, dtype=torch.float64) * 2
    w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
    wd = torch.randn(3, 1, 3, 3, dtype=torch.float64)
    t[f"dcn{dil}.offset"], t[f"dcn{dil}.mask"], t[f"dcn{dil}.weight"], t[f"dcn{dil}.dw_weight"] = off, mask, w, wd
    t[f"dcn{dil}.out"] = deform_conv2d(x, off, w, padding=dil, dilation=dil, mask=mask)
    t[f"dcn{dil}.dw_out"] = deform_conv2d(x, off, wd, padding=dil, dilation=dil, mask=mask)
t["dcn.input"] = x
u = torch.randn(1, 2, 3, 5, dtype=torch.float64)
t["up.input"] = u
t["up.out"] = F.interpolate(u, scale_factor=2, mode="bilinear", align_corners=False)
r = torch.rand(1, 3, 10, 17, dtype=torch.float64)
t["resize.input"] = r
t["resize.out"] = F.interpolate(r, size=(8, 8), mode="bilinear", align_corners=False, antialias=False)
t["resize_up.out"] = F.interpolate(r, size=(32, 32), mode="bilinear", align_corners=False)
save_file({k: v.contiguous() for k, v in t.items()}, "ops_reference.safetensors")
