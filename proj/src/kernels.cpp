#include "cotprobe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace cotprobe::kernels {

namespace {

typedef float v16 __attribute__((vector_size(64)));

constexpr int MR = 6;
constexpr int NR = 32;
constexpr int KC = 256;
constexpr int MC = 96;

inline v16 load(const float* p) {
    v16 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store(float* p, v16 v) { std::memcpy(p, &v, sizeof v); }

// B block (kc x n) into NR-wide panels, zero padded on the right.
void pack_b(int kc, int n, View<float> b, int p0, float* out, bool parallel) {
    const int panels = (n + NR - 1) / NR;
#pragma omp parallel for schedule(static) if (parallel)
    for (int jp = 0; jp < panels; ++jp) {
        float* dst = out + static_cast<std::ptrdiff_t>(jp) * kc * NR;
        const int j0 = jp * NR;
        const int w = std::min(NR, n - j0);
        for (int p = 0; p < kc; ++p) {
            for (int j = 0; j < w; ++j) dst[p * NR + j] = b(p0 + p, j0 + j);
            for (int j = w; j < NR; ++j) dst[p * NR + j] = 0.0f;
        }
    }
}

// A block (mc x kc) into MR-tall panels, zero padded at the bottom.
void pack_a(int mc, int kc, View<float> a, int i0, int p0, float* out) {
    const int panels = (mc + MR - 1) / MR;
    for (int ip = 0; ip < panels; ++ip) {
        float* dst = out + static_cast<std::ptrdiff_t>(ip) * kc * MR;
        const int r0 = i0 + ip * MR;
        const int h = std::min(MR, mc - ip * MR);
        for (int p = 0; p < kc; ++p) {
            for (int i = 0; i < h; ++i) dst[p * MR + i] = a(r0 + i, p0 + p);
            for (int i = h; i < MR; ++i) dst[p * MR + i] = 0.0f;
        }
    }
}

void micro_kernel(int kc, const float* ap, const float* bp, float* c, std::ptrdiff_t ldc, int mr,
                  int nr) {
    v16 acc[MR][2] = {};
    for (int p = 0; p < kc; ++p) {
        const v16 b0 = load(bp);
        const v16 b1 = load(bp + 16);
        for (int i = 0; i < MR; ++i) {
            acc[i][0] += ap[i] * b0;
            acc[i][1] += ap[i] * b1;
        }
        ap += MR;
        bp += NR;
    }
    if (mr == MR && nr == NR) {
        for (int i = 0; i < MR; ++i) {
            float* row = c + i * ldc;
            store(row, load(row) + acc[i][0]);
            store(row + 16, load(row + 16) + acc[i][1]);
        }
        return;
    }
    alignas(64) float tmp[MR][NR];
    for (int i = 0; i < MR; ++i) {
        store(tmp[i], acc[i][0]);
        store(tmp[i] + 16, acc[i][1]);
    }
    for (int i = 0; i < mr; ++i) {
        for (int j = 0; j < nr; ++j) c[i * ldc + j] += tmp[i][j];
    }
}

}  // namespace

void gemm_blocked(int m, int n, int k, View<float> a, View<float> b, float* c, std::ptrdiff_t ldc,
                  bool accumulate, bool parallel) {
    if (!accumulate) {
#pragma omp parallel for schedule(static) if (parallel)
        for (int i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0f);
    }
    if (m == 0 || n == 0 || k == 0) return;
    const int panels_b = (n + NR - 1) / NR;
    std::vector<float> bpack(static_cast<std::size_t>(panels_b) * KC * NR);
    const int blocks = (m + MC - 1) / MC;
    for (int p0 = 0; p0 < k; p0 += KC) {
        const int kc = std::min(KC, k - p0);
        pack_b(kc, n, b, p0, bpack.data(), parallel);
#pragma omp parallel if (parallel)
        {
            std::vector<float> apack(static_cast<std::size_t>(MC) * KC);
#pragma omp for schedule(static)
            for (int blk = 0; blk < blocks; ++blk) {
                const int i0 = blk * MC;
                const int mc = std::min(MC, m - i0);
                pack_a(mc, kc, a, i0, p0, apack.data());
                for (int jp = 0; jp < panels_b; ++jp) {
                    const int j0 = jp * NR;
                    const int nr = std::min(NR, n - j0);
                    const float* bp = bpack.data() + static_cast<std::ptrdiff_t>(jp) * kc * NR;
                    for (int ip = 0; ip * MR < mc; ++ip) {
                        const int mr = std::min(MR, mc - ip * MR);
                        micro_kernel(kc, apack.data() + static_cast<std::ptrdiff_t>(ip) * kc * MR, bp,
                                     c + (i0 + ip * MR) * ldc + j0, ldc, mr, nr);
                    }
                }
            }
        }
    }
}

double probe_grad_ref(const ProbeBatch& batch, const float* w, const float* bias, float* gw,
                      float* gb) {
    const int d = batch.d;
    const int nc = batch.classes;
    std::fill(gw, gw + static_cast<std::ptrdiff_t>(d) * nc, 0.0f);
    std::fill(gb, gb + nc, 0.0f);
    std::vector<double> z(nc);
    double loss = 0.0;
    for (int r = 0; r < batch.n; ++r) {
        const float* x = batch.x + static_cast<std::ptrdiff_t>(r) * d;
        const float* cnt = batch.counts + static_cast<std::ptrdiff_t>(r) * batch.count_stride;
        double zmax = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < nc; ++c) {
            double s = bias[c];
            for (int p = 0; p < d; ++p) s += static_cast<double>(x[p]) * w[p * nc + c];
            z[c] = s;
            zmax = std::max(zmax, s);
        }
        double denom = 0.0;
        for (int c = 0; c < nc; ++c) denom += std::exp(z[c] - zmax);
        const double lse = zmax + std::log(denom);
        double weight = 0.0;
        for (int c = 0; c < nc; ++c) weight += cnt[c];
        for (int c = 0; c < nc; ++c) {
            loss -= cnt[c] * (z[c] - lse);
            const double g = (weight * std::exp(z[c] - lse) - cnt[c]) / batch.total;
            gb[c] += static_cast<float>(g);
            for (int p = 0; p < d; ++p) gw[p * nc + c] += static_cast<float>(g * x[p]);
        }
    }
    return loss / batch.total;
}

namespace {

// exp for a vector of floats: range reduction by ln2 and a degree-6
// polynomial; relative error below 2e-7 on the range softmax needs.
typedef int v16i __attribute__((vector_size(64)));

inline v16 vexp(v16 x) {
    x = x < -87.0f ? v16{} - 87.0f : x;
    x = x > 88.0f ? v16{} + 88.0f : x;
    // Round to nearest via the 1.5 * 2^23 trick.
    const v16 n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
    const v16 r = x - n * 0.693359375f + n * 2.12194440e-4f;
    v16 p = r * 1.9875691500e-4f + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const v16i bits = (__builtin_convertvector(n, v16i) + 127) << 23;
    v16 scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

inline v16 vtanh(v16 u) { return 1.0f - 2.0f / (vexp(2.0f * u) + 1.0f); }

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluA = 0.044715f;

constexpr int kChunkBlocks = 48;  // fixed reduction chunks of 768 rows

inline v16 swap_halves(v16 v, int width) {
    v16i mask;
    for (int i = 0; i < 16; ++i) mask[i] = i ^ width;
    return __builtin_shuffle(v, mask);
}

inline v16 all_sum(v16 v) {
    for (const int w : {8, 4, 2, 1}) v += swap_halves(v, w);
    return v;
}

template <int NC>
double probe_grad_packed_impl(const PackedProbeBatch& batch, const float* w, const float* bias,
                              float* gw, float* gb, bool parallel, bool want_loss) {
    constexpr int L = kProbeLanes;
    const int d = batch.d;
    const int nc = batch.classes;
    const int chunks = (batch.blocks + kChunkBlocks - 1) / kChunkBlocks;
    // Weights padded to NC classes; padded logits are pinned far below the rest.
    std::vector<float> wpad(static_cast<std::size_t>(d) * NC, 0.0f);
    float bpad[NC];
    for (int p = 0; p < d; ++p)
        for (int c = 0; c < nc; ++c) wpad[p * NC + c] = w[p * nc + c];
    for (int c = 0; c < NC; ++c) bpad[c] = c < nc ? bias[c] : -1e30f;

    const std::size_t stride = static_cast<std::size_t>(d + 1) * NC;
    std::vector<float> partial(stride * static_cast<std::size_t>(std::max(chunks, 1)), 0.0f);
    std::vector<double> chunk_loss(static_cast<std::size_t>(std::max(chunks, 1)), 0.0);
    const float inv_total = static_cast<float>(1.0 / batch.total);

#pragma omp parallel if (parallel)
    {
        // Softmax gradients of one chunk, [block][class][lane]; small enough for L1.
        std::vector<v16> gchunk(static_cast<std::size_t>(kChunkBlocks) * NC);
#pragma omp for schedule(static)
        for (int ch = 0; ch < chunks; ++ch) {
            double loss = 0.0;
            const int b0 = ch * kChunkBlocks;
            const int b1 = std::min(batch.blocks, b0 + kChunkBlocks);
            const float* xchunk = batch.x.data() + static_cast<std::ptrdiff_t>(b0) * d * L;
            v16 bacc[NC] = {};
            for (int blk = b0; blk < b1; ++blk) {
                const float* x = batch.x.data() + static_cast<std::ptrdiff_t>(blk) * d * L;
                const float* cnt = batch.counts.data() + static_cast<std::ptrdiff_t>(blk) * nc * L;
                v16 z[NC];
#pragma GCC unroll 16
                for (int c = 0; c < NC; ++c) z[c] = v16{} + bpad[c];
                for (int p = 0; p < d; ++p) {
                    const v16 xv = load(x + p * L);
                    const float* wp = wpad.data() + p * NC;
#pragma GCC unroll 16
                    for (int c = 0; c < NC; ++c) z[c] += xv * wp[c];
                }
                v16 zmax = z[0];
#pragma GCC unroll 16
                for (int c = 1; c < NC; ++c) zmax = z[c] > zmax ? z[c] : zmax;
                v16 denom{};
                v16 weight{};
                v16* g = gchunk.data() + static_cast<std::ptrdiff_t>(blk - b0) * NC;
#pragma GCC unroll 16
                for (int c = 0; c < NC; ++c) {
                    g[c] = c < nc ? vexp(z[c] - zmax) : v16{};
                    denom += g[c];
                    if (c < nc) weight += load(cnt + c * L);
                }
                const v16 scale = weight / denom;
                if (want_loss) {
                    for (int i = 0; i < L; ++i) {
                        const float lse = zmax[i] + std::log(denom[i]);
                        for (int c = 0; c < nc; ++c) {
                            loss -= static_cast<double>(cnt[c * L + i]) * (z[c][i] - lse);
                        }
                    }
                }
#pragma GCC unroll 16
                for (int c = 0; c < NC; ++c) {
                    if (c < nc) g[c] = (g[c] * scale - load(cnt + c * L)) * inv_total;
                    bacc[c] += g[c];
                }
            }

            // Weight gradient: two state dimensions at a time, accumulators in registers.
            float* out = partial.data() + stride * static_cast<std::size_t>(ch);
            const int nb = b1 - b0;
            int p = 0;
            for (; p + 2 <= d; p += 2) {
                v16 a0[NC] = {};
                v16 a1[NC] = {};
                for (int i = 0; i < nb; ++i) {
                    const float* x = xchunk + static_cast<std::ptrdiff_t>(i) * d * L + p * L;
                    const v16 xa = load(x);
                    const v16 xb = load(x + L);
                    const v16* g = gchunk.data() + static_cast<std::ptrdiff_t>(i) * NC;
#pragma GCC unroll 16
                    for (int c = 0; c < NC; ++c) {
                        a0[c] += xa * g[c];
                        a1[c] += xb * g[c];
                    }
                }
                for (int c = 0; c < NC; ++c) {
                    out[p * NC + c] = all_sum(a0[c])[0];
                    out[(p + 1) * NC + c] = all_sum(a1[c])[0];
                }
            }
            for (; p < d; ++p) {
                v16 a0[NC] = {};
                for (int i = 0; i < nb; ++i) {
                    const v16 xa = load(xchunk + static_cast<std::ptrdiff_t>(i) * d * L + p * L);
                    const v16* g = gchunk.data() + static_cast<std::ptrdiff_t>(i) * NC;
                    for (int c = 0; c < NC; ++c) a0[c] += xa * g[c];
                }
                for (int c = 0; c < NC; ++c) out[p * NC + c] = all_sum(a0[c])[0];
            }
            for (int c = 0; c < NC; ++c) out[static_cast<std::ptrdiff_t>(d) * NC + c] = all_sum(bacc[c])[0];
            chunk_loss[static_cast<std::size_t>(ch)] = loss;
        }
    }

    // Fixed-order reduction over chunks keeps the result independent of threads.
    std::fill(gw, gw + static_cast<std::ptrdiff_t>(d) * nc, 0.0f);
    std::fill(gb, gb + nc, 0.0f);
    double loss = 0.0;
    for (int ch = 0; ch < chunks; ++ch) {
        const float* part = partial.data() + stride * static_cast<std::size_t>(ch);
        for (int p = 0; p < d; ++p)
            for (int c = 0; c < nc; ++c) gw[p * nc + c] += part[p * NC + c];
        for (int c = 0; c < nc; ++c) gb[c] += part[static_cast<std::ptrdiff_t>(d) * NC + c];
        loss += chunk_loss[static_cast<std::size_t>(ch)];
    }
    return want_loss ? loss / batch.total : 0.0;
}

}  // namespace

PackedProbeBatch pack_probe_batch(const ProbeBatch& batch) {
    constexpr int L = kProbeLanes;
    PackedProbeBatch out;
    out.d = batch.d;
    out.classes = batch.classes;
    out.total = batch.total;
    out.blocks = (batch.n + L - 1) / L;
    out.x.assign(static_cast<std::size_t>(out.blocks) * batch.d * L, 0.0f);
    out.counts.assign(static_cast<std::size_t>(out.blocks) * batch.classes * L, 0.0f);
    for (int r = 0; r < batch.n; ++r) {
        const int blk = r / L;
        const int lane = r % L;
        const float* x = batch.x + static_cast<std::ptrdiff_t>(r) * batch.d;
        float* xd = out.x.data() + static_cast<std::ptrdiff_t>(blk) * batch.d * L + lane;
        for (int p = 0; p < batch.d; ++p) xd[p * L] = x[p];
        const float* cnt = batch.counts + static_cast<std::ptrdiff_t>(r) * batch.count_stride;
        float* cd = out.counts.data() + static_cast<std::ptrdiff_t>(blk) * batch.classes * L + lane;
        for (int c = 0; c < batch.classes; ++c) cd[c * L] = cnt[c];
    }
    return out;
}

double probe_grad_packed(const PackedProbeBatch& batch, const float* w, const float* bias,
                         float* gw, float* gb, bool parallel, bool want_loss) {
    if (batch.classes <= 10) {
        return probe_grad_packed_impl<10>(batch, w, bias, gw, gb, parallel, want_loss);
    }
    return probe_grad_packed_impl<kProbeLanes>(batch, w, bias, gw, gb, parallel, want_loss);
}

void gelu_forward(const float* x, float* y, std::size_t n) {
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        const v16 v = load(x + i);
        store(y + i, 0.5f * v * (1.0f + vtanh(kGeluC * (v + kGeluA * v * v * v))));
    }
    for (; i < n; ++i) {
        const float v = x[i];
        y[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
}

void gelu_backward(const float* x, float* g, std::size_t n) {
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        const v16 v = load(x + i);
        const v16 th = vtanh(kGeluC * (v + kGeluA * v * v * v));
        const v16 du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
        store(g + i, load(g + i) * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du));
    }
    for (; i < n; ++i) {
        const float v = x[i];
        const float th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
        g[i] *= 0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du;
    }
}

}  // namespace cotprobe::kernels
