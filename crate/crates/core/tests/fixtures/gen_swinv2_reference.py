"""Regenerates swinv2_pico_reference.safetensors with timm as the reference.

Usage: python3 gen_swinv2_reference.py  (requires torch, timm, safetensors)
"""
import torch
from safetensors.torch import save_file
from timm.models.swin_transformer_v2 import SwinTransformerV2

torch.manual_seed(0)
side = 96
model = SwinTransformerV2(
    img_size=side, patch_size=4, embed_dim=4, depths=(2, 2, 2, 2), num_heads=(1, 1, 2, 2),
    window_size=4, mlp_ratio=2.0, num_classes=0, strict_img_size=False,
).eval()
with torch.no_grad():
    for name, p in model.named_parameters():
        if name.endswith("logit_scale"):
            p.copy_(torch.log(torch.full_like(p, 10.0)) + 0.3 * torch.randn_like(p))
        else:
            p.copy_(0.3 * torch.randn_like(p))
    x = torch.randn(1, 3, side, side)
    out = {"input": x}
    h = model.patch_embed(x)
    for i, layer in enumerate(model.layers):
        h = layer(h)
        out[f"stage{i + 1}"] = h.permute(0, 3, 1, 2).contiguous()
state = {f"weights.{k}": v.detach().contiguous() for k, v in model.state_dict().items()
         if "relative_" not in k and "attn_mask" not in k and not k.startswith("head")
         and not k.startswith("norm.")}
state.update(out)
save_file(state, "swinv2_pico_reference.safetensors")
