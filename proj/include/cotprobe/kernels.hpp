#pragma once

#include <cstddef>
#include <type_traits>
#include <vector>

namespace cotprobe::kernels {

// Serial runs the plain reference loops; Parallel runs the blocked OpenMP
// versions. Parallel results do not depend on the thread count.
enum class Exec { Serial, Parallel };

// Strided matrix view: element (i, j) lives at p[i * rs + j * cs].
template <class T>
struct View {
    const T* p;
    std::ptrdiff_t rs;
    std::ptrdiff_t cs;
    const T& operator()(std::ptrdiff_t i, std::ptrdiff_t j) const { return p[i * rs + j * cs]; }
};

template <class T>
View<T> row_major(const T* p, std::ptrdiff_t cols) { return {p, cols, 1}; }
template <class T>
View<T> transposed(const T* p, std::ptrdiff_t cols) { return {p, 1, cols}; }

// C (m x n, row stride ldc) = A B, or += when accumulate is set.
template <class T>
void gemm_ref(int m, int n, int k, View<T> a, View<T> b, T* c, std::ptrdiff_t ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T sum = 0;
            for (int p = 0; p < k; ++p) sum += a(i, p) * b(p, j);
            c[i * ldc + j] = accumulate ? c[i * ldc + j] + sum : sum;
        }
    }
}

void gemm_blocked(int m, int n, int k, View<float> a, View<float> b, float* c, std::ptrdiff_t ldc,
                  bool accumulate, bool parallel);

template <class T>
void gemm(Exec exec, int m, int n, int k, View<T> a, View<T> b, T* c, std::ptrdiff_t ldc,
          bool accumulate) {
    if constexpr (std::is_same_v<T, float>) {
        if (exec == Exec::Parallel) {
            gemm_blocked(m, n, k, a, b, c, ldc, accumulate, true);
            return;
        }
    }
    gemm_ref(m, n, k, a, b, c, ldc, accumulate);
}

// Full-batch softmax regression over deduplicated rows. Row r of x (n x d)
// stands for counts[r * count_stride + c] original samples with label c.
struct ProbeBatch {
    const float* x = nullptr;
    const float* counts = nullptr;
    int n = 0;
    int d = 0;
    int classes = 0;
    int count_stride = 0;
    double total = 0;  // number of original samples
};

constexpr int kProbeLanes = 16;  // rows per packed block; also the class limit

// Gradient of the mean cross-entropy w.r.t. w (d x classes, row-major) and
// bias. Returns the loss. Reference: straightforward scalar loops.
double probe_grad_ref(const ProbeBatch& batch, const float* w, const float* bias, float* gw,
                      float* gb);

// Rows regrouped into blocks of kProbeLanes with rows along the vector lanes.
// Padding rows carry zero counts and so contribute nothing.
struct PackedProbeBatch {
    int blocks = 0;
    int d = 0;
    int classes = 0;
    double total = 0;
    std::vector<float> x;       // [block][p][lane]
    std::vector<float> counts;  // [block][class][lane]
};

PackedProbeBatch pack_probe_batch(const ProbeBatch& batch);

// Same contract as probe_grad_ref on the packed layout. The loss is only
// computed when want_loss is set (0 is returned otherwise).
double probe_grad_packed(const PackedProbeBatch& batch, const float* w, const float* bias,
                         float* gw, float* gb, bool parallel, bool want_loss = true);

// Tanh-approximated GELU on contiguous floats, vectorised with a polynomial
// exp. gelu_backward multiplies g in place by the derivative at x.
void gelu_forward(const float* x, float* y, std::size_t n);
void gelu_backward(const float* x, float* g, std::size_t n);

}  // namespace cotprobe::kernels
