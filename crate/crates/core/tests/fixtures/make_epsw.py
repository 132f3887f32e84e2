"""Export a seeded, untrained unet2d-v1 network as an EPSW fixture.

    python make_epsw.py out.epsw [--n 16] [--base 8] [--seed 0]

The network is the torch reference for the Rust inference code; the check
vectors it records are computed here in float32.
"""

import argparse
import json
import math
import struct

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb, groups):
        super().__init__()
        self.gn1 = nn.GroupNorm(groups, cin, eps=1e-5)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.gn2 = nn.GroupNorm(groups, cout, eps=1e-5)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.gn1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.gn2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Wrap(nn.Module):
    def __init__(self, block):
        super().__init__()
        self.res = block


class UNet(nn.Module):
    def __init__(self, base, mults, groups):
        super().__init__()
        self.base = base
        e = 4 * base
        self.time = nn.Module()
        self.time.lin1 = nn.Linear(base, e)
        self.time.lin2 = nn.Linear(e, e)
        self.conv_in = nn.Conv2d(1, base, 3, padding=1)
        chans = [base * m for m in mults]
        down, c = [], base
        for ch in chans:
            down.append(Wrap(ResBlock(c, ch, e, groups)))
            c = ch
        self.down = nn.ModuleList(down)
        self.mid = Wrap(ResBlock(c, c, e, groups))
        up = [None] * len(chans)
        for level in reversed(range(len(chans))):
            up[level] = Wrap(ResBlock(c + chans[level], chans[level], e, groups))
            c = chans[level]
        self.up = nn.ModuleList(up)
        self.out = nn.Module()
        self.out.gn = nn.GroupNorm(groups, base, eps=1e-5)
        self.conv_out = nn.Conv2d(base, 1, 3, padding=1)

    def embed(self, t):
        half = self.base // 2
        k = torch.arange(half, dtype=torch.float64)
        freq = torch.exp(-math.log(10000.0) * k / half)
        arg = (t.to(torch.float64) - 1.0)[:, None] * freq[None, :]
        emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=1).to(torch.float32)
        return self.time.lin2(F.silu(self.time.lin1(emb)))

    def forward(self, x, t):
        emb = self.embed(t)
        h = self.conv_in(x)
        skips = []
        levels = len(self.down)
        for level, block in enumerate(self.down):
            h = block.res(h, emb)
            skips.append(h)
            if level + 1 < levels:
                h = F.avg_pool2d(h, 2)
        h = self.mid.res(h, emb)
        for level in reversed(range(levels)):
            h = self.up[level].res(torch.cat([h, skips[level]], dim=1), emb)
            if level > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.silu(self.out.gn(h)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--mults", default="1,2,2")
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checks", type=int, default=8)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    mults = [int(m) for m in args.mults.split(",")]
    net = UNet(args.base, mults, args.groups).eval()
    # default init leaves the output layer small; widen it so the check
    # vectors exercise every path
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(1.5)

    T = 1000
    betas = [1e-4 + (0.02 - 1e-4) * i / (T - 1) for i in range(T)]

    checks = []
    gen = torch.Generator().manual_seed(args.seed + 1)
    for k in range(args.checks):
        x = torch.randn(1, 1, args.n, args.n, generator=gen)
        t = 1 + (k * 997 + 13) % T
        with torch.no_grad():
            y = net(x, torch.tensor([t]))
        checks.append({"input": x.flatten().tolist(), "t": t, "output": y.flatten().tolist()})

    tensors, blobs, offset = [], [], 0
    for name, p in sorted(net.state_dict().items()):
        data = p.detach().to(torch.float32).contiguous().flatten().tolist()
        tensors.append({"name": name, "shape": list(p.shape), "dtype": "f32", "offset": offset})
        blob = struct.pack(f"<{len(data)}f", *data)
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "architecture": {
            "name": "unet2d-v1",
            "base_channels": args.base,
            "channel_mults": mults,
            "groups": args.groups,
            "image_size": args.n,
        },
        "tensors": tensors,
        "schedule": {"T": T, "betas": betas},
        "normalization": {"mu": 0.0, "sigma": 1.0, "hurst": 0.5, "n": args.n},
        "check_vectors": checks,
        "metadata": {"seed": args.seed, "torch": torch.__version__, "trained": False},
    }
    blob = json.dumps(manifest).encode()
    with open(args.out, "wb") as f:
        f.write(b"EPSW")
        f.write(struct.pack("<II", 1, len(blob)))
        f.write(blob)
        for b in blobs:
            f.write(b)


if __name__ == "__main__":
    main()
