#!/usr/bin/env python3
"""Standalone scalar oracle for golden fixtures.

Straight-line triple-loop implementation with no shared code with the Rust
library. Computes in float64 and stores float32 fixtures in the DCNT format.

Usage: python3 gen_fixtures.py <out_dir>
"""

import math
import struct
import sys

MASK = (1 << 64) - 1


class SplitMix64:
    """Mirror of the library's seeded_uniform stream. Keep in sync."""

    def __init__(self, seed):
        self.state = seed & MASK

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def next_uniform(self, lo, hi):
        # 53-bit mantissa path, then rounded to f32
        f = (self.next_u64() >> 11) * (2.0 ** -53)
        return f32(lo + f * (hi - lo))


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def seeded_uniform(count, seed, lo, hi):
    rng = SplitMix64(seed)
    return [rng.next_uniform(lo, hi) for _ in range(count)]


def write_dcnt(path, dims, data, dtype="f32"):
    assert len(dims) == 4
    n = 1
    for d in dims:
        n *= d
    assert len(data) == n
    with open(path, "wb") as fh:
        fh.write(b"DCNT")
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<B", 0 if dtype == "f32" else 1))
        fh.write(struct.pack("<B", 4))
        fh.write(b"\x00\x00")
        for d in dims:
            fh.write(struct.pack("<Q", d))
        if dtype == "f32":
            fh.write(struct.pack("<%df" % n, *[f32(v) for v in data]))
        else:
            fh.write(struct.pack("<%de" % n, *data))


def bilinear(x, N, H, W, C, n, c, py, px):
    """Zero-padded 4-neighbor bilinear sample of channel plane c."""
    y0 = math.floor(py)
    x0 = math.floor(px)
    ty = py - y0
    tx = px - x0
    acc = 0.0
    for (yy, wy) in ((y0, 1.0 - ty), (y0 + 1, ty)):
        for (xx, wx) in ((x0, 1.0 - tx), (x0 + 1, tx)):
            if 0 <= yy < H and 0 <= xx < W:
                v = x[((n * H + yy) * W + xx) * C + c]
            else:
                v = 0.0
            acc += wy * wx * v
    return acc


def softmax(vals):
    m = max(vals)
    es = [math.exp(v - m) for v in vals]
    s = sum(es)
    return [e / s for e in es]


def dcn_forward(x, N, H, W, C, off, wgt, G, k, use_softmax, offset_scale=1.0):
    D = C // G
    K = k * k
    r = (k - 1) // 2
    out = [0.0] * (N * H * W * C)
    for n in range(N):
        for h in range(H):
            for w in range(W):
                for g in range(G):
                    base = (((n * H + h) * W + w) * G + g) * K
                    m = [wgt[base + kk] for kk in range(K)]
                    if use_softmax:
                        m = softmax(m)
                    for c in range(D):
                        acc = 0.0
                        for kk in range(K):
                            dy = kk // k - r
                            dx = kk % k - r
                            oy = off[(base + kk) * 2 + 0]
                            ox = off[(base + kk) * 2 + 1]
                            py = h + dy + offset_scale * oy
                            px = w + dx + offset_scale * ox
                            s = bilinear(x, N, H, W, C, n, g * D + c, py, px)
                            acc += m[kk] * s
                        out[((n * H + h) * W + w) * C + g * D + c] = acc
    return out


# ---------------------------------------------------------------------------
# Module-layer pieces (all float64 scalar loops)
# ---------------------------------------------------------------------------


def linear_per_location(x, N, H, W, Cin, weight, bias, Cout):
    out = [0.0] * (N * H * W * Cout)
    for p in range(N * H * W):
        for o in range(Cout):
            acc = bias[o]
            for i in range(Cin):
                acc += weight[o * Cin + i] * x[p * Cin + i]
            out[p * Cout + o] = acc
    return out


def dwconv(x, N, H, W, C, taps, k):
    r = (k - 1) // 2
    out = [0.0] * (N * H * W * C)
    for n in range(N):
        for h in range(H):
            for w in range(W):
                for c in range(C):
                    acc = 0.0
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            yy = h + dy
                            xx = w + dx
                            if 0 <= yy < H and 0 <= xx < W:
                                t = taps[((dy + r) * k + (dx + r)) * C + c]
                                acc += t * x[((n * H + yy) * W + xx) * C + c]
                    out[((n * H + h) * W + w) * C + c] = acc
    return out


def layer_norm(x, count, C, eps=1e-6):
    out = [0.0] * (count * C)
    for p in range(count):
        row = x[p * C:(p + 1) * C]
        mean = sum(row) / C
        var = sum((v - mean) ** 2 for v in row) / C
        inv = 1.0 / math.sqrt(var + eps)
        for c in range(C):
            out[p * C + c] = (row[c] - mean) * inv
    return out


def gelu(x):
    return [0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x]


def he_uniform(count, seed, fan_in):
    b = math.sqrt(6.0 / fan_in)
    return seeded_uniform(count, seed, -b, b)


def branch_forward(x, N, H, W, C, G, k, variant, seed):
    """Returns (offsets flat NHW*2GK, weights flat NHW*GK).

    Seed scheme (keep in sync with the library's seeded_dense):
      dw taps seed+2, offset linear seed+3, weight linear seed+4,
      fused linear seed+5.
    """
    K = k * k
    taps = he_uniform(k * k * C, seed + 2, k * k)
    t = dwconv(x, N, H, W, C, taps, k)
    if variant == "v3":
        t = layer_norm(t, N * H * W, C)
        t = gelu(t)
        ow = he_uniform(2 * G * K * C, seed + 3, C)
        ob = [0.0] * (2 * G * K)
        ww = he_uniform(G * K * C, seed + 4, C)
        wb = [0.0] * (G * K)
        offs = linear_per_location(t, N, H, W, C, ow, ob, 2 * G * K)
        wgts = linear_per_location(t, N, H, W, C, ww, wb, G * K)
    else:
        fw = he_uniform(3 * G * K * C, seed + 5, C)
        fb = [0.0] * (3 * G * K)
        fused = linear_per_location(t, N, H, W, C, fw, fb, 3 * G * K)
        offs = [0.0] * (N * H * W * 2 * G * K)
        wgts = [0.0] * (N * H * W * G * K)
        for p in range(N * H * W):
            for j in range(2 * G * K):
                offs[p * 2 * G * K + j] = fused[p * 3 * G * K + j]
            for j in range(G * K):
                wgts[p * G * K + j] = fused[p * 3 * G * K + 2 * G * K + j]
    return offs, wgts


def offsets_to_field(offs, N, H, W, G, K):
    # branch emits per location [g0k0y, g0k0x, g0k1y, ...]; field layout is
    # (N,H,W,G,K,2) which is the same flat order
    return offs


def module_forward(x, N, H, W, C, G, k, variant, seed):
    use_proj = variant != "v4lw"
    if use_proj:
        ipw = he_uniform(C * C, seed + 1, C)
        ipb = [0.0] * C
        xp = linear_per_location(x, N, H, W, C, ipw, ipb, C)
    else:
        xp = x
    offs, wgts = branch_forward(xp, N, H, W, C, G, k, "v3" if variant == "v3" else "v4", seed)
    y = dcn_forward(xp, N, H, W, C, offs, wgts, G, k, variant == "v3")
    if use_proj:
        opw = he_uniform(C * C, seed + 6, C)
        opb = [0.0] * C
        y = linear_per_location(y, N, H, W, C, opw, opb, C)
    return y


def main(out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)

    # frozen PRNG golden
    first = seeded_uniform(1, 42, -1.0, 1.0)[0]
    print("seeded_uniform(42,-1,1) first element: %.9g (bits 0x%08x)" %
          (first, struct.unpack("<I", struct.pack("<f", first))[0]))

    # core op goldens: x (1,4,4,16) G=2 k=3
    N, H, W, C, G, k = 1, 4, 4, 16, 2, 3
    K = k * k
    x = seeded_uniform(N * H * W * C, 7, -1.0, 1.0)
    off = seeded_uniform(N * H * W * G * K * 2, 8, -2.0, 2.0)
    wgt = seeded_uniform(N * H * W * G * K, 9, -1.0, 1.0)
    y = dcn_forward(x, N, H, W, C, off, wgt, G, k, False)
    write_dcnt(os.path.join(out_dir, "dcn_ref_nosoftmax.dcnt"), (N, H, W, C), y)
    y = dcn_forward(x, N, H, W, C, off, wgt, G, k, True)
    write_dcnt(os.path.join(out_dir, "dcn_ref_softmax.dcnt"), (N, H, W, C), y)

    # branch goldens: x (1,6,6,32) G=2 k=3, dense seeded params seed=100
    N, H, W, C, G, k = 1, 6, 6, 32, 2, 3
    K = k * k
    x = seeded_uniform(N * H * W * C, 11, -1.0, 1.0)
    for variant in ("v3", "v4"):
        offs, wgts = branch_forward(x, N, H, W, C, G, k, variant, 100)
        write_dcnt(os.path.join(out_dir, "branch_%s_offsets.dcnt" % variant),
                   (N, H, W, 2 * G * K), offs)
        write_dcnt(os.path.join(out_dir, "branch_%s_weights.dcnt" % variant),
                   (N, H, W, G * K), wgts)

    # end-to-end module goldens: x (1,8,8,32) G=2 k=3, seed=200
    N, H, W, C, G, k = 1, 8, 8, 32, 2, 3
    x = seeded_uniform(N * H * W * C, 13, -1.0, 1.0)
    for variant in ("v3", "v4"):
        y = module_forward(x, N, H, W, C, G, k, variant, 200)
        write_dcnt(os.path.join(out_dir, "module_%s.dcnt" % variant), (N, H, W, C), y)

    # attention golden: N=6 d=4, printed for freezing into tests
    Nt, d = 6, 4
    q = seeded_uniform(Nt * d, 21, -1.0, 1.0)
    kk = seeded_uniform(Nt * d, 22, -1.0, 1.0)
    v = seeded_uniform(Nt * d, 23, -1.0, 1.0)
    scale = 1.0 / math.sqrt(d)
    out = []
    for i in range(Nt):
        logits = [scale * sum(q[i * d + t] * kk[j * d + t] for t in range(d))
                  for j in range(Nt)]
        attn = softmax(logits)
        for t in range(d):
            out.append(sum(attn[j] * v[j * d + t] for j in range(Nt)))
    print("attention golden (N=6,d=4, softmax on):")
    print("[" + ", ".join("%.9g" % f32(o) for o in out) + "]")

    print("wrote fixtures to", out_dir)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "golden")
