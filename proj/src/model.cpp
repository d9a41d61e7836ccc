#include "cotprobe/model.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <type_traits>
#include <unordered_set>

#include "cotprobe/rng.hpp"

namespace cotprobe {

using kernels::Exec;
using kernels::View;

// ---- vocabulary -----------------------------------------------------------

int token_id(char symbol) {
    const auto pos = kSymbols.find(symbol);
    if (pos == std::string_view::npos) {
        throw UnknownSymbol(std::string("symbol '") + symbol + "' is not in the vocabulary");
    }
    return static_cast<int>(pos);
}

char token_symbol(int id) {
    if (id < 0 || id >= kVocabSize) throw UnknownSymbol("token id " + std::to_string(id) + " out of range");
    return kSymbols[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (const char c : text) out.push_back(token_id(c));
    return out;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (const int t : tokens) out.push_back(token_symbol(t));
    return out;
}

namespace {

void append(SequenceLayout& seq, std::string_view text, int eq_pos) {
    for (const char c : text) {
        seq.tokens.push_back(token_id(c));
        seq.eq_pos.push_back(eq_pos);
    }
}

}  // namespace

SequenceLayout layout_record(const Instance& instance, const CotChain& chain) {
    SequenceLayout seq;
    const int first = instance.equations.empty() ? -1 : instance.equations.front().eq_pos;
    seq.tokens.push_back(kBos);
    seq.eq_pos.push_back(first);
    for (std::size_t i = 0; i < instance.equations.size(); ++i) {
        const Equation& eq = instance.equations[i];
        append(seq, render(eq), eq.eq_pos);
        append(seq, i + 1 < instance.equations.size() ? "," : ";", eq.eq_pos);
    }
    append(seq, std::string{instance.query} + "=?", -1);
    seq.tokens.push_back(kSep);
    seq.eq_pos.push_back(-1);
    seq.t0 = static_cast<int>(seq.tokens.size());
    for (std::size_t k = 0; k < chain.steps.size(); ++k) {
        const Equation& step = chain.steps[k];
        append(seq, render(step), step.eq_pos);
        append(seq, k + 1 < chain.steps.size() ? "," : ";", step.eq_pos);
    }
    return seq;
}

std::vector<int> prompt_tokens(const Instance& instance) {
    std::vector<int> out{kBos};
    for (const int t : tokenize(render(instance))) out.push_back(t);
    out.push_back(kSep);
    return out;
}

// ---- parameters -------------------------------------------------------------

void ModelConfig::validate() const {
    if (layers < 1 || width < 1 || heads < 1 || context < 2) {
        throw ConfigError("model dimensions must be positive");
    }
    if (width % heads != 0) throw ConfigError("width must be divisible by heads");
}

ParamLayout::ParamLayout(const ModelConfig& c) {
    auto add = [&](const std::string& name, int rows, int cols) {
        tensors.push_back(Tensor{name, total, rows, cols});
        total += static_cast<std::size_t>(rows) * cols;
        return tensors.back().offset;
    };
    const int d = c.width;
    tok_emb = add("tok_emb", kVocabSize, d);
    pos_emb = add("pos_emb", c.context, d);
    for (int l = 0; l < c.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Layer L{};
        L.ln1_g = add(p + "ln1_g", 1, d);
        L.ln1_b = add(p + "ln1_b", 1, d);
        L.w_qkv = add(p + "w_qkv", d, 3 * d);
        L.b_qkv = add(p + "b_qkv", 1, 3 * d);
        L.w_o = add(p + "w_o", d, d);
        L.b_o = add(p + "b_o", 1, d);
        L.ln2_g = add(p + "ln2_g", 1, d);
        L.ln2_b = add(p + "ln2_b", 1, d);
        L.w_fc = add(p + "w_fc", d, 4 * d);
        L.b_fc = add(p + "b_fc", 1, 4 * d);
        L.w_proj = add(p + "w_proj", 4 * d, d);
        L.b_proj = add(p + "b_proj", 1, d);
        layer.push_back(L);
    }
    lnf_g = add("lnf_g", 1, d);
    lnf_b = add("lnf_b", 1, d);
    w_head = add("w_head", d, kVocabSize);
}

Batch make_batch(std::span<const SequenceLayout> seqs) {
    Batch b;
    b.size = static_cast<int>(seqs.size());
    for (const auto& s : seqs) b.length = std::max(b.length, s.length());
    b.tokens.assign(static_cast<std::size_t>(b.size) * b.length, kBos);
    b.loss_mask.assign(b.tokens.size(), 0.0f);
    for (int r = 0; r < b.size; ++r) {
        const SequenceLayout& s = seqs[static_cast<std::size_t>(r)];
        std::copy(s.tokens.begin(), s.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r) * b.length);
        for (int i = std::max(0, s.t0 - 1); i + 1 < s.length(); ++i) {
            b.loss_mask[static_cast<std::size_t>(r) * b.length + i] = 1.0f;
        }
    }
    return b;
}

// ---- building blocks ----------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;

template <class T>
void layernorm(bool par, int n, int d, const T* x, const T* g, const T* b, T* out, T* mean, T* rstd) {
#pragma omp parallel for schedule(static) if (par)
    for (int r = 0; r < n; ++r) {
        const T* xr = x + static_cast<std::ptrdiff_t>(r) * d;
        T mu = 0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        T var = 0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= d;
        const T rs = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kLnEps));
        T* o = out + static_cast<std::ptrdiff_t>(r) * d;
        for (int j = 0; j < d; ++j) o[j] = (xr[j] - mu) * rs * g[j] + b[j];
        if (mean) mean[r] = mu;
        if (rstd) rstd[r] = rs;
    }
}

// dx += d(out)/dx^T dout; dg, db accumulate.
template <class T>
void layernorm_back(bool par, int n, int d, const T* dout, const T* x, const T* g, const T* mean,
                    const T* rstd, T* dx, T* dg, T* db) {
#pragma omp parallel for schedule(static) if (par)
    for (int r = 0; r < n; ++r) {
        const T* xr = x + static_cast<std::ptrdiff_t>(r) * d;
        const T* dr = dout + static_cast<std::ptrdiff_t>(r) * d;
        T* dxr = dx + static_cast<std::ptrdiff_t>(r) * d;
        const T mu = mean[r];
        const T rs = rstd[r];
        T m1 = 0;
        T m2 = 0;
        for (int j = 0; j < d; ++j) {
            const T dxh = dr[j] * g[j];
            m1 += dxh;
            m2 += dxh * (xr[j] - mu) * rs;
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
            const T xh = (xr[j] - mu) * rs;
            dxr[j] += rs * (dr[j] * g[j] - m1 - xh * m2);
        }
    }
    for (int r = 0; r < n; ++r) {
        const T* xr = x + static_cast<std::ptrdiff_t>(r) * d;
        const T* dr = dout + static_cast<std::ptrdiff_t>(r) * d;
        for (int j = 0; j < d; ++j) {
            dg[j] += dr[j] * (xr[j] - mean[r]) * rstd[r];
            db[j] += dr[j];
        }
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <class T>
T gelu(T x) {
    return static_cast<T>(0.5) * x * (1 + std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = static_cast<T>(kGeluC) * (1 + static_cast<T>(3 * 0.044715) * x * x);
    return static_cast<T>(0.5) * (1 + th) + static_cast<T>(0.5) * x * (1 - th * th) * du;
}

constexpr std::size_t kGeluChunk = 4096;

template <class T>
void gelu_apply(bool par, const T* x, T* y, std::size_t n) {
    const auto chunks = static_cast<std::ptrdiff_t>((n + kGeluChunk - 1) / kGeluChunk);
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t c = 0; c < chunks; ++c) {
        const std::size_t lo = static_cast<std::size_t>(c) * kGeluChunk;
        const std::size_t len = std::min(kGeluChunk, n - lo);
        if constexpr (std::is_same_v<T, float>) {
            kernels::gelu_forward(x + lo, y + lo, len);
        } else {
            for (std::size_t i = lo; i < lo + len; ++i) y[i] = gelu(x[i]);
        }
    }
}

template <class T>
void gelu_grad_apply(bool par, const T* x, T* g, std::size_t n) {
    const auto chunks = static_cast<std::ptrdiff_t>((n + kGeluChunk - 1) / kGeluChunk);
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t c = 0; c < chunks; ++c) {
        const std::size_t lo = static_cast<std::size_t>(c) * kGeluChunk;
        const std::size_t len = std::min(kGeluChunk, n - lo);
        if constexpr (std::is_same_v<T, float>) {
            kernels::gelu_backward(x + lo, g + lo, len);
        } else {
            for (std::size_t i = lo; i < lo + len; ++i) g[i] *= gelu_grad(x[i]);
        }
    }
}

template <class T>
void linear(Exec ex, int n, int in, int out, const T* x, const T* w, const T* b, T* y) {
    kernels::gemm<T>(ex, n, out, in, kernels::row_major(x, in), kernels::row_major(w, out), y, out, false);
    if (b) {
#pragma omp parallel for schedule(static) if (ex == Exec::Parallel)
        for (int r = 0; r < n; ++r) {
            T* yr = y + static_cast<std::ptrdiff_t>(r) * out;
            for (int j = 0; j < out; ++j) yr[j] += b[j];
        }
    }
}

// dx (+)= dy W^T, dW += x^T dy, db += column sums of dy.
template <class T>
void linear_back(Exec ex, int n, int in, int out, const T* x, const T* w, const T* dy, T* dx,
                 bool dx_accumulate, T* dw, T* db) {
    if (dx) {
        kernels::gemm<T>(ex, n, in, out, kernels::row_major(dy, out), kernels::transposed(w, out), dx, in,
                         dx_accumulate);
    }
    kernels::gemm<T>(ex, in, out, n, kernels::transposed(x, in), kernels::row_major(dy, out), dw, out, true);
    if (db) {
        for (int r = 0; r < n; ++r) {
            const T* dr = dy + static_cast<std::ptrdiff_t>(r) * out;
            for (int j = 0; j < out; ++j) db[j] += dr[j];
        }
    }
}

// Copies head h of the keys (which = 1) or values (which = 2) of sequence b
// into a dh x Tn block so that score loops run along the key index.
template <class T>
void gather_transposed(const T* base, int Tn, int d, int h, int dh, int which, T* out) {
    for (int j = 0; j < Tn; ++j) {
        const T* src = base + static_cast<std::ptrdiff_t>(j) * 3 * d + which * d + h * dh;
        for (int e = 0; e < dh; ++e) out[static_cast<std::ptrdiff_t>(e) * Tn + j] = src[e];
    }
}

template <class T>
void attention(bool par, int B, int Tn, int H, int d, const T* qkv, T* probs, T* out) {
    const int dh = d / H;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
#pragma omp parallel if (par)
    {
        std::vector<T> kt(static_cast<std::size_t>(dh) * Tn);
#pragma omp for schedule(static)
        for (int bh = 0; bh < B * H; ++bh) {
            const int b = bh / H;
            const int h = bh % H;
            const T* base = qkv + static_cast<std::ptrdiff_t>(b) * Tn * 3 * d;
            gather_transposed(base, Tn, d, h, dh, 1, kt.data());
            for (int i = 0; i < Tn; ++i) {
                const T* q = base + static_cast<std::ptrdiff_t>(i) * 3 * d + h * dh;
                T* p = probs + (static_cast<std::ptrdiff_t>(bh) * Tn + i) * Tn;
                for (int j = 0; j < Tn; ++j) p[j] = 0;
                for (int e = 0; e < dh; ++e) {
                    const T qe = q[e] * scale;
                    const T* kr = kt.data() + static_cast<std::ptrdiff_t>(e) * Tn;
                    for (int j = 0; j <= i; ++j) p[j] += qe * kr[j];
                }
                T m = p[0];
                for (int j = 1; j <= i; ++j) m = std::max(m, p[j]);
                T sum = 0;
                for (int j = 0; j <= i; ++j) {
                    p[j] = std::exp(p[j] - m);
                    sum += p[j];
                }
                const T inv = 1 / sum;
                for (int j = 0; j <= i; ++j) p[j] *= inv;
                T* o = out + (static_cast<std::ptrdiff_t>(b) * Tn + i) * d + h * dh;
                for (int e = 0; e < dh; ++e) o[e] = 0;
                for (int j = 0; j <= i; ++j) {
                    const T* v = base + static_cast<std::ptrdiff_t>(j) * 3 * d + 2 * d + h * dh;
                    const T pj = p[j];
                    for (int e = 0; e < dh; ++e) o[e] += pj * v[e];
                }
            }
        }
    }
}

// Writes dqkv (not accumulated).
template <class T>
void attention_back(bool par, int B, int Tn, int H, int d, const T* qkv, const T* probs, const T* dout,
                    T* dqkv) {
    const int dh = d / H;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
#pragma omp parallel if (par)
    {
        std::vector<T> vt(static_cast<std::size_t>(dh) * Tn);
        std::vector<T> dp(static_cast<std::size_t>(Tn));
#pragma omp for schedule(static)
        for (int bh = 0; bh < B * H; ++bh) {
            const int b = bh / H;
            const int h = bh % H;
            const T* base = qkv + static_cast<std::ptrdiff_t>(b) * Tn * 3 * d;
            T* dbase = dqkv + static_cast<std::ptrdiff_t>(b) * Tn * 3 * d;
            gather_transposed(base, Tn, d, h, dh, 2, vt.data());
            for (int i = 0; i < Tn; ++i) {
                T* row = dbase + static_cast<std::ptrdiff_t>(i) * 3 * d + h * dh;
                for (int e = 0; e < dh; ++e) row[e] = row[d + e] = row[2 * d + e] = 0;
            }
            for (int i = 0; i < Tn; ++i) {
                const T* p = probs + (static_cast<std::ptrdiff_t>(bh) * Tn + i) * Tn;
                const T* go = dout + (static_cast<std::ptrdiff_t>(b) * Tn + i) * d + h * dh;
                const T* q = base + static_cast<std::ptrdiff_t>(i) * 3 * d + h * dh;
                T* dq = dbase + static_cast<std::ptrdiff_t>(i) * 3 * d + h * dh;
                for (int j = 0; j <= i; ++j) dp[static_cast<std::size_t>(j)] = 0;
                for (int e = 0; e < dh; ++e) {
                    const T ge = go[e];
                    const T* vr = vt.data() + static_cast<std::ptrdiff_t>(e) * Tn;
                    for (int j = 0; j <= i; ++j) dp[static_cast<std::size_t>(j)] += ge * vr[j];
                }
                T dot = 0;
                for (int j = 0; j <= i; ++j) dot += p[j] * dp[static_cast<std::size_t>(j)];
                for (int j = 0; j <= i; ++j) {
                    const T pj = p[j];
                    const T ds = pj * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                    const T* k = base + static_cast<std::ptrdiff_t>(j) * 3 * d + d + h * dh;
                    T* dk = dbase + static_cast<std::ptrdiff_t>(j) * 3 * d + d + h * dh;
                    T* dv = dk + d;
                    for (int e = 0; e < dh; ++e) {
                        dq[e] += ds * k[e];
                        dk[e] += ds * q[e];
                        dv[e] += pj * go[e];
                    }
                }
            }
        }
    }
}

template <class T>
struct LayerActs {
    std::vector<T> ln1, mean1, rstd1, qkv, probs, att, mid, ln2, mean2, rstd2, fc, act;
};

template <class T>
struct Workspace {
    std::vector<std::vector<T>> resid;  // L + 1 tensors of N x d
    std::vector<LayerActs<T>> acts;
    std::vector<T> lnf, meanf, rstdf;
    std::vector<T> logits;
};

// Activations are reused across calls; reallocating them every pass costs
// as much as a small forward.
template <class T>
Workspace<T>& scratch() {
    thread_local Workspace<T> ws;
    return ws;
}

template <class T>
void check_tokens(const ModelConfig& c, const Batch& batch) {
    if (batch.length > c.context) {
        throw ContextOverflow("sequence of " + std::to_string(batch.length) + " tokens exceeds context " +
                              std::to_string(c.context));
    }
    for (const int t : batch.tokens) {
        if (t < 0 || t >= kVocabSize) throw UnknownSymbol("token id " + std::to_string(t) + " out of range");
    }
}

template <class T>
void forward(const Transformer<T>& model, const Batch& batch, Workspace<T>& ws,
             const std::vector<StatePatch<T>>& patches, Capture<T>* capture, const CaptureSpec* spec) {
    const ModelConfig& c = model.config();
    check_tokens<T>(c, batch);
    const ParamLayout& P = model.layout();
    const T* w = model.params().data();
    const Exec ex = model.exec();
    const bool par = ex == Exec::Parallel;
    const int B = batch.size;
    const int Tn = batch.length;
    const int N = B * Tn;
    const int d = c.width;
    const int L = c.layers;
    const std::size_t Nd = static_cast<std::size_t>(N) * d;

    for (const auto& p : patches) {
        if (p.row < 0 || p.row >= B || p.index < 0 || p.index >= Tn || p.layer < 0 || p.layer > L) {
            throw PatchOutOfRange("patch (" + std::to_string(p.index) + ", " + std::to_string(p.layer) +
                                  ") lies outside the run");
        }
    }

    std::vector<int> cap_idx;
    std::vector<int> cap_layers;
    if (capture) {
        if (spec && !spec->indices.empty()) cap_idx = spec->indices;
        else
            for (int i = 0; i < Tn; ++i) cap_idx.push_back(i);
        if (spec && !spec->layers.empty()) cap_layers = spec->layers;
        else
            for (int l = 0; l <= L; ++l) cap_layers.push_back(l);
        for (const int i : cap_idx)
            if (i < 0 || i >= Tn) throw OutOfRange("capture index " + std::to_string(i) + " outside the run");
        for (const int l : cap_layers)
            if (l < 0 || l > L) throw OutOfRange("capture layer " + std::to_string(l) + " outside the model");
        capture->indices = cap_idx;
        capture->layers = cap_layers;
        capture->width = d;
        capture->states.assign(static_cast<std::size_t>(B) * cap_idx.size() * cap_layers.size() * d, T{});
    }

    auto finish_layer = [&](int l) {
        T* x = ws.resid[static_cast<std::size_t>(l)].data();
        for (const auto& p : patches) {
            if (p.layer == l) {
                std::copy(p.values, p.values + d, x + (static_cast<std::ptrdiff_t>(p.row) * Tn + p.index) * d);
            }
        }
        if (!capture) return;
        for (std::size_t li = 0; li < cap_layers.size(); ++li) {
            if (cap_layers[li] != l) continue;
            for (int b = 0; b < B; ++b) {
                for (std::size_t ii = 0; ii < cap_idx.size(); ++ii) {
                    const T* src = x + (static_cast<std::ptrdiff_t>(b) * Tn + cap_idx[ii]) * d;
                    std::copy(src, src + d, const_cast<T*>(capture->at(b, static_cast<int>(ii), static_cast<int>(li))));
                }
            }
        }
    };

    ws.resid.resize(static_cast<std::size_t>(L) + 1);
    ws.acts.resize(static_cast<std::size_t>(L));
    for (auto& r : ws.resid) r.resize(Nd);
    {
        T* x = ws.resid[0].data();
        const T* te = w + P.tok_emb;
        const T* pe = w + P.pos_emb;
        for (int b = 0; b < B; ++b) {
            for (int i = 0; i < Tn; ++i) {
                const int tok = batch.tokens[static_cast<std::size_t>(b) * Tn + i];
                T* row = x + (static_cast<std::ptrdiff_t>(b) * Tn + i) * d;
                for (int j = 0; j < d; ++j) row[j] = te[static_cast<std::ptrdiff_t>(tok) * d + j] + pe[static_cast<std::ptrdiff_t>(i) * d + j];
            }
        }
        finish_layer(0);
    }

    for (int l = 0; l < L; ++l) {
        const auto& Lp = P.layer[static_cast<std::size_t>(l)];
        LayerActs<T>& A = ws.acts[static_cast<std::size_t>(l)];
        const T* x = ws.resid[static_cast<std::size_t>(l)].data();
        A.ln1.resize(Nd);
        A.mean1.resize(static_cast<std::size_t>(N));
        A.rstd1.resize(static_cast<std::size_t>(N));
        A.qkv.resize(Nd * 3);
        A.probs.resize(static_cast<std::size_t>(B) * c.heads * Tn * Tn);
        A.att.resize(Nd);
        A.mid.resize(Nd);
        A.ln2.resize(Nd);
        A.mean2.resize(static_cast<std::size_t>(N));
        A.rstd2.resize(static_cast<std::size_t>(N));
        A.fc.resize(Nd * 4);
        A.act.resize(Nd * 4);

        layernorm(par, N, d, x, w + Lp.ln1_g, w + Lp.ln1_b, A.ln1.data(), A.mean1.data(), A.rstd1.data());
        linear(ex, N, d, 3 * d, A.ln1.data(), w + Lp.w_qkv, w + Lp.b_qkv, A.qkv.data());
        attention(par, B, Tn, c.heads, d, A.qkv.data(), A.probs.data(), A.att.data());
        linear(ex, N, d, d, A.att.data(), w + Lp.w_o, w + Lp.b_o, A.mid.data());
        for (std::size_t i = 0; i < Nd; ++i) A.mid[i] += x[i];
        layernorm(par, N, d, A.mid.data(), w + Lp.ln2_g, w + Lp.ln2_b, A.ln2.data(), A.mean2.data(), A.rstd2.data());
        linear(ex, N, d, 4 * d, A.ln2.data(), w + Lp.w_fc, w + Lp.b_fc, A.fc.data());
        gelu_apply(par, A.fc.data(), A.act.data(), Nd * 4);
        T* next = ws.resid[static_cast<std::size_t>(l) + 1].data();
        linear(ex, N, 4 * d, d, A.act.data(), w + Lp.w_proj, w + Lp.b_proj, next);
        for (std::size_t i = 0; i < Nd; ++i) next[i] += A.mid[i];
        finish_layer(l + 1);
    }

    ws.lnf.resize(Nd);
    ws.meanf.resize(static_cast<std::size_t>(N));
    ws.rstdf.resize(static_cast<std::size_t>(N));
    layernorm(par, N, d, ws.resid[static_cast<std::size_t>(L)].data(), w + P.lnf_g, w + P.lnf_b, ws.lnf.data(),
              ws.meanf.data(), ws.rstdf.data());
    ws.logits.resize(static_cast<std::size_t>(N) * kVocabSize);
    linear<T>(ex, N, d, kVocabSize, ws.lnf.data(), w + P.w_head, nullptr, ws.logits.data());
}

// Masked cross-entropy; writes dlogits when requested.
template <class T>
T cross_entropy(const Batch& batch, const std::vector<T>& logits, std::vector<T>* dlogits) {
    const int B = batch.size;
    const int Tn = batch.length;
    double weight = 0;
    for (const float m : batch.loss_mask) weight += m;
    if (dlogits) dlogits->assign(logits.size(), T{});
    if (weight <= 0) return T{};
    std::vector<double> row_loss(static_cast<std::size_t>(B) * Tn, 0.0);
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i + 1 < Tn; ++i) {
            const std::size_t r = static_cast<std::size_t>(b) * Tn + i;
            const float m = batch.loss_mask[r];
            if (m == 0.0f) continue;
            const T* z = logits.data() + r * kVocabSize;
            const int target = batch.tokens[r + 1];
            T zmax = z[0];
            for (int v = 1; v < kVocabSize; ++v) zmax = std::max(zmax, z[v]);
            T sum = 0;
            for (int v = 0; v < kVocabSize; ++v) sum += std::exp(z[v] - zmax);
            const T lse = zmax + std::log(sum);
            row_loss[r] = m * static_cast<double>(lse - z[target]);
            if (dlogits) {
                T* g = dlogits->data() + r * kVocabSize;
                const T scale = static_cast<T>(m / weight);
                for (int v = 0; v < kVocabSize; ++v) g[v] = std::exp(z[v] - lse) * scale;
                g[target] -= scale;
            }
        }
    }
    double total = 0;
    for (const double x : row_loss) total += x;
    return static_cast<T>(total / weight);
}

}  // namespace

// ---- Transformer ------------------------------------------------------------

template <class T>
Transformer<T>::Transformer(const ModelConfig& config, Exec exec)
    : config_(config), layout_((config.validate(), config)), params_(layout_.total), exec_(exec) {
    Rng rng(config.seed);
    const double resid_std = 0.02 / std::sqrt(2.0 * config.layers);
    for (const Tensor& t : layout_.tensors) {
        T* p = params_.data() + t.offset;
        const std::string& n = t.name;
        const auto ends_with = [&](std::string_view s) {
            return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with("_g")) {
            std::fill(p, p + t.size(), T{1});
        } else if (ends_with("_b") || n.find(".b_") != std::string::npos) {
            std::fill(p, p + t.size(), T{0});
        } else {
            const double sd = (ends_with("w_o") || ends_with("w_proj")) ? resid_std : 0.02;
            for (std::size_t i = 0; i < t.size(); ++i) p[i] = static_cast<T>(rng.normal() * sd);
        }
    }
}

template <class T>
std::vector<T> Transformer<T>::logits(const Batch& batch, const std::vector<StatePatch<T>>& patches,
                                      Capture<T>* capture, const CaptureSpec* spec) const {
    Workspace<T>& ws = scratch<T>();
    forward<T>(*this, batch, ws, patches, capture, spec);
    return ws.logits;
}

template <class T>
T Transformer<T>::loss(const Batch& batch) const {
    Workspace<T>& ws = scratch<T>();
    forward<T>(*this, batch, ws, {}, nullptr, nullptr);
    return cross_entropy<T>(batch, ws.logits, nullptr);
}

template <class T>
T Transformer<T>::loss_and_grad(const Batch& batch, std::vector<T>& grad) const {
    Workspace<T>& ws = scratch<T>();
    forward<T>(*this, batch, ws, {}, nullptr, nullptr);
    std::vector<T> dlogits;
    const T loss = cross_entropy<T>(batch, ws.logits, &dlogits);

    const ModelConfig& c = config_;
    const ParamLayout& P = layout_;
    const T* w = params_.data();
    const Exec ex = exec_;
    const bool par = ex == Exec::Parallel;
    const int B = batch.size;
    const int Tn = batch.length;
    const int N = B * Tn;
    const int d = c.width;
    const int L = c.layers;
    const std::size_t Nd = static_cast<std::size_t>(N) * d;
    grad.assign(params_.size(), T{});
    T* g = grad.data();

    std::vector<T> dlnf(Nd);
    linear_back<T>(ex, N, d, kVocabSize, ws.lnf.data(), w + P.w_head, dlogits.data(), dlnf.data(), false,
                   g + P.w_head, nullptr);
    std::vector<T> dx(Nd, T{});
    layernorm_back(par, N, d, dlnf.data(), ws.resid[static_cast<std::size_t>(L)].data(), w + P.lnf_g, ws.meanf.data(),
                   ws.rstdf.data(), dx.data(), g + P.lnf_g, g + P.lnf_b);

    std::vector<T> dact(Nd * 4);
    std::vector<T> dln(Nd);
    std::vector<T> datt(Nd);
    std::vector<T> dqkv(Nd * 3);
    for (int l = L - 1; l >= 0; --l) {
        const auto& Lp = P.layer[static_cast<std::size_t>(l)];
        const LayerActs<T>& A = ws.acts[static_cast<std::size_t>(l)];
        // dx holds the gradient w.r.t. this block's output (= mid + mlp).
        linear_back<T>(ex, N, 4 * d, d, A.act.data(), w + Lp.w_proj, dx.data(), dact.data(), false,
                       g + Lp.w_proj, g + Lp.b_proj);
        gelu_grad_apply(par, A.fc.data(), dact.data(), Nd * 4);
        linear_back<T>(ex, N, d, 4 * d, A.ln2.data(), w + Lp.w_fc, dact.data(), dln.data(), false, g + Lp.w_fc,
                       g + Lp.b_fc);
        layernorm_back(par, N, d, dln.data(), A.mid.data(), w + Lp.ln2_g, A.mean2.data(), A.rstd2.data(), dx.data(),
                       g + Lp.ln2_g, g + Lp.ln2_b);
        // dx now is the gradient w.r.t. mid (= x + attention output).
        linear_back<T>(ex, N, d, d, A.att.data(), w + Lp.w_o, dx.data(), datt.data(), false, g + Lp.w_o,
                       g + Lp.b_o);
        attention_back(par, B, Tn, c.heads, d, A.qkv.data(), A.probs.data(), datt.data(), dqkv.data());
        linear_back<T>(ex, N, d, 3 * d, A.ln1.data(), w + Lp.w_qkv, dqkv.data(), dln.data(), false,
                       g + Lp.w_qkv, g + Lp.b_qkv);
        layernorm_back(par, N, d, dln.data(), ws.resid[static_cast<std::size_t>(l)].data(), w + Lp.ln1_g,
                       A.mean1.data(), A.rstd1.data(), dx.data(), g + Lp.ln1_g, g + Lp.ln1_b);
    }
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < Tn; ++i) {
            const int tok = batch.tokens[static_cast<std::size_t>(b) * Tn + i];
            const T* row = dx.data() + (static_cast<std::ptrdiff_t>(b) * Tn + i) * d;
            T* te = g + P.tok_emb + static_cast<std::ptrdiff_t>(tok) * d;
            T* pe = g + P.pos_emb + static_cast<std::ptrdiff_t>(i) * d;
            for (int j = 0; j < d; ++j) {
                te[j] += row[j];
                pe[j] += row[j];
            }
        }
    }
    return loss;
}

template class Transformer<float>;
template class Transformer<double>;

// ---- evaluation and decoding -----------------------------------------------------

namespace {

int argmax(const float* z, int n) {
    int best = 0;
    for (int v = 1; v < n; ++v) {
        if (z[v] > z[best]) best = v;
    }
    return best;
}

std::vector<SequenceLayout> layouts_of(std::span<const Record> records) {
    std::vector<SequenceLayout> out;
    out.reserve(records.size());
    for (const Record& r : records) out.push_back(layout_record(r.instance, r.chain));
    return out;
}

}  // namespace

double evaluate_exact_match(const Model& model, std::span<const Record> records, int batch_size) {
    if (records.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
        const auto seqs = layouts_of(records.subspan(start, end - start));
        const Batch batch = make_batch(seqs);
        const std::vector<float> z = model.logits(batch);
        for (int r = 0; r < batch.size; ++r) {
            const SequenceLayout& s = seqs[static_cast<std::size_t>(r)];
            bool ok = true;
            for (int i = s.t0 - 1; i + 1 < s.length() && ok; ++i) {
                const std::size_t row = static_cast<std::size_t>(r) * batch.length + i;
                ok = argmax(z.data() + row * kVocabSize, kVocabSize) == s.tokens[static_cast<std::size_t>(i) + 1];
            }
            if (ok) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

std::vector<int> generate_greedy(const Model& model, std::span<const int> prompt, int max_new) {
    // An empty prompt is started from BOS; the continuation is then unconstrained.
    std::vector<int> seq(prompt.begin(), prompt.end());
    if (seq.empty()) seq.push_back(kBos);
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_new) {
        if (static_cast<int>(seq.size()) >= model.config().context) {
            throw BudgetExceeded("context filled before the output terminated");
        }
        Batch batch;
        batch.size = 1;
        batch.length = static_cast<int>(seq.size());
        batch.tokens = seq;
        batch.loss_mask.assign(seq.size(), 0.0f);
        const std::vector<float> z = model.logits(batch);
        const int next = argmax(z.data() + (seq.size() - 1) * kVocabSize, kVocabSize);
        seq.push_back(next);
        out.push_back(next);
        if (next == kEnd) return out;
    }
    throw BudgetExceeded("no terminator within " + std::to_string(max_new) + " generated tokens");
}

std::vector<bool> forced_agreement(const Model& model, std::span<const int> prompt,
                                   std::span<const int> reference) {
    if (prompt.empty()) throw ConfigError("forced decoding needs a non-empty prompt");
    Batch batch;
    batch.size = 1;
    batch.tokens.assign(prompt.begin(), prompt.end());
    batch.tokens.insert(batch.tokens.end(), reference.begin(), reference.end());
    batch.length = static_cast<int>(batch.tokens.size());
    batch.loss_mask.assign(batch.tokens.size(), 0.0f);
    const std::vector<float> z = model.logits(batch);
    std::vector<bool> out;
    for (std::size_t k = 0; k < reference.size(); ++k) {
        const std::size_t row = prompt.size() - 1 + k;
        out.push_back(argmax(z.data() + row * kVocabSize, kVocabSize) == reference[k]);
    }
    return out;
}

void check_convergence(double accuracy, double threshold) {
    if (accuracy < threshold) {
        throw DidNotConverge("exact match " + std::to_string(accuracy) + " below " + std::to_string(threshold));
    }
}

// ---- training ---------------------------------------------------------------

TrainResult train_model(Model& model, const DatasetSplit& split, const TrainConfig& cfg) {
    if (cfg.batch_size <= 0 || cfg.max_steps <= 0) throw ConfigError("batch size and steps must be positive");
    const int level = split.config.level;
    const std::string& ops = split.config.operators;
    std::unordered_set<std::string> held_out;
    for (const Record& r : split.test) held_out.insert(render(r.instance));
    auto accept = [&](const Instance& inst) { return !held_out.contains(render(inst)); };

    auto draw = [&](Rng& rng, int n) {
        std::vector<Record> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            Instance inst = generate_instance(level, rng, ops, {}, accept);
            CotChain chain = build_gold_chain(inst);
            out.push_back(Record{std::move(inst), std::move(chain)});
        }
        return out;
    };
    Rng stream(mix_seed(cfg.seed, 0x7a11));
    Rng val_rng(mix_seed(cfg.seed, 0x7a12));
    const std::vector<Record> val = draw(val_rng, cfg.val_size);

    std::vector<float>& w = model.params();
    std::vector<float> m(w.size(), 0.0f);
    std::vector<float> v(w.size(), 0.0f);
    std::vector<float> grad;
    std::vector<char> decay(w.size(), 0);
    for (const Tensor& t : model.layout().tensors) {
        if (t.rows > 1 && t.name.find("emb") == std::string::npos) {
            std::fill(decay.begin() + static_cast<std::ptrdiff_t>(t.offset),
                      decay.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()), 1);
        }
    }
    const double b1 = 0.9;
    const double b2 = 0.98;
    const double eps = 1e-8;

    TrainResult result;
    int streak = 0;
    const auto started = std::chrono::steady_clock::now();
    for (int step = 1; step <= cfg.max_steps; ++step) {
        const std::vector<Record> records = draw(stream, cfg.batch_size);
        const auto seqs = layouts_of(records);
        const float loss = model.loss_and_grad(make_batch(seqs), grad);

        double norm2 = 0.0;
        for (const float x : grad) norm2 += static_cast<double>(x) * x;
        const double norm = std::sqrt(norm2);
        const double clip = (cfg.clip > 0 && norm > cfg.clip) ? cfg.clip / norm : 1.0;

        double lr = cfg.lr;
        if (step <= cfg.warmup) {
            lr *= static_cast<double>(step) / std::max(1, cfg.warmup);
        } else {
            const double progress = static_cast<double>(step - cfg.warmup) /
                                    std::max(1, cfg.max_steps - cfg.warmup);
            lr *= cfg.min_lr_fraction +
                  (1.0 - cfg.min_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
        }
        const double c1 = 1.0 - std::pow(b1, step);
        const double c2 = 1.0 - std::pow(b2, step);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = grad[i] * clip;
            m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
            v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
            double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            if (decay[i]) update += cfg.weight_decay * w[i];
            w[i] = static_cast<float>(w[i] - lr * update);
        }

        result.curve.push_back(CurvePoint{step, loss, -1});
        result.steps = step;
        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            const double acc = evaluate_exact_match(model, val);
            result.curve.back().val_accuracy = acc;
            streak = acc >= cfg.stop_accuracy ? streak + 1 : 0;
            if (streak >= cfg.stop_patience) {
                result.stopped_early = step < cfg.max_steps;
                break;
            }
        }
        if (cfg.time_budget_s > 0) {
            const double elapsed =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            if (elapsed > cfg.time_budget_s) break;
        }
    }
    return result;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'O', 'T', 'P', 'R', 'O', 'B', 'E'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class V>
void put(std::ostream& out, V value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class V>
V get(std::istream& in) {
    V value{};
    in.read(reinterpret_cast<char*>(&value), sizeof value);
    if (!in) throw CheckpointError("truncated checkpoint");
    return value;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path.string());
    const ModelConfig& c = model.config();
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::int32_t>(out, c.layers);
    put<std::int32_t>(out, c.width);
    put<std::int32_t>(out, c.heads);
    put<std::int32_t>(out, c.context);
    put<std::int32_t>(out, kVocabSize);
    put<std::uint64_t>(out, c.seed);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.layout().tensors.size()));
    for (const Tensor& t : model.layout().tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put<std::int32_t>(out, t.rows);
        put<std::int32_t>(out, t.cols);
        out.write(reinterpret_cast<const char*>(model.params().data() + t.offset),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint: " + path.string());
    if (get<std::uint32_t>(in) != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
    ModelConfig c;
    c.layers = get<std::int32_t>(in);
    c.width = get<std::int32_t>(in);
    c.heads = get<std::int32_t>(in);
    c.context = get<std::int32_t>(in);
    if (get<std::int32_t>(in) != kVocabSize) throw CheckpointError("vocabulary size mismatch");
    c.seed = get<std::uint64_t>(in);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("bad model header: ") + e.what());
    }
    Model model(c);
    const auto count = get<std::uint32_t>(in);
    if (count != model.layout().tensors.size()) throw CheckpointError("tensor count mismatch");
    for (const Tensor& t : model.layout().tensors) {
        const auto len = get<std::uint32_t>(in);
        if (len > 256) throw CheckpointError("corrupt tensor name");
        std::string name(len, '\0');
        in.read(name.data(), len);
        const int rows = get<std::int32_t>(in);
        const int cols = get<std::int32_t>(in);
        if (name != t.name || rows != t.rows || cols != t.cols) {
            throw CheckpointError("unexpected tensor " + name + " (wanted " + t.name + ")");
        }
        in.read(reinterpret_cast<char*>(model.params().data() + t.offset),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) throw CheckpointError("truncated tensor " + name);
    }
    return model;
}

}  // namespace cotprobe
