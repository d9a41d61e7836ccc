#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotprobe/eqdsl.hpp"
#include "cotprobe/kernels.hpp"
#include "cotprobe/taskgen.hpp"

namespace cotprobe {

// ---- vocabulary -----------------------------------------------------------

// One token per symbol. '^' is BOS and '|' separates Input from Output.
inline constexpr std::string_view kSymbols =
    "^|=+-,;?0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
inline constexpr int kVocabSize = static_cast<int>(kSymbols.size());
inline constexpr int kBos = 0;
inline constexpr int kSep = 1;
inline constexpr int kEnd = 6;  // ';' also terminates the Output

int token_id(char symbol);  // throws UnknownSymbol
char token_symbol(int id);
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);

// Token sequence of one record: BOS, Input, SEP, chain, ';'.
// Index i has relative position t = i - t0, so SEP sits at t = -1 and the
// first chain token at t = 0.
struct SequenceLayout {
    std::vector<int> tokens;
    int t0 = 0;                // absolute index of the first Output token
    std::vector<int> eq_pos;   // per absolute index: equation position t_eq
    int prompt_length() const { return t0; }
    int length() const { return static_cast<int>(tokens.size()); }
    int t_of(int index) const { return index - t0; }
    int index_of(int t) const { return t + t0; }
};

// Equation membership follows the text: separators belong to the equation
// before them, BOS to the first Input equation, SEP to the query, and the
// final ';' to the last chain step.
SequenceLayout layout_record(const Instance& instance, const CotChain& chain);
std::vector<int> prompt_tokens(const Instance& instance);

// ---- model ------------------------------------------------------------------

struct ModelConfig {
    int layers = 4;
    int width = 128;
    int heads = 4;
    int context = 96;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Offsets of every parameter tensor inside one flat buffer.
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };
    std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_head = 0;
    std::vector<Layer> layer;
    std::vector<Tensor> tensors;
    std::size_t total = 0;

    explicit ParamLayout(const ModelConfig& config);
};

// A batch of equal-length sequences. loss_mask[b * T + i] weights the
// prediction made at position i (of token i + 1).
struct Batch {
    int size = 0;
    int length = 0;
    std::vector<int> tokens;
    std::vector<float> loss_mask;
};

Batch make_batch(std::span<const SequenceLayout> seqs);

// Replacement of the residual state after layer `layer` (0 = embedding) at
// absolute position `index` of batch row `row`.
template <class T>
struct StatePatch {
    int row = 0;
    int index = 0;
    int layer = 0;
    const T* values = nullptr;
};

// Which states to copy out of a forward pass. Empty lists select everything.
struct CaptureSpec {
    std::vector<int> indices;
    std::vector<int> layers;
};

// Captured states laid out [row][index][layer][width] over the selected
// indices and layers.
template <class T>
struct Capture {
    std::vector<int> indices;
    std::vector<int> layers;
    int width = 0;
    std::vector<T> states;
    const T* at(int row, int i, int l) const {
        const std::size_t per_row = indices.size() * layers.size() * static_cast<std::size_t>(width);
        return states.data() + row * per_row +
               (static_cast<std::size_t>(i) * layers.size() + static_cast<std::size_t>(l)) * width;
    }
};

template <class T>
class Transformer {
public:
    explicit Transformer(const ModelConfig& config, kernels::Exec exec = kernels::Exec::Parallel);

    const ModelConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    std::vector<T>& params() { return params_; }
    const std::vector<T>& params() const { return params_; }
    kernels::Exec exec() const { return exec_; }
    void set_exec(kernels::Exec exec) { exec_ = exec; }

    // Logits [row][index][vocab] for every position.
    std::vector<T> logits(const Batch& batch, const std::vector<StatePatch<T>>& patches = {},
                          Capture<T>* capture = nullptr, const CaptureSpec* spec = nullptr) const;

    // Masked mean next-token cross-entropy; fills grad (same layout as params).
    T loss_and_grad(const Batch& batch, std::vector<T>& grad) const;
    T loss(const Batch& batch) const;

private:
    ModelConfig config_;
    ParamLayout layout_;
    std::vector<T> params_;
    kernels::Exec exec_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

using Model = Transformer<float>;

// ---- training -------------------------------------------------------------

struct TrainConfig {
    int max_steps = 3000;
    int batch_size = 64;
    double lr = 2e-3;
    int warmup = 100;
    double min_lr_fraction = 0.1;
    double weight_decay = 0.0;
    double clip = 1.0;
    int eval_every = 100;
    int val_size = 512;
    double stop_accuracy = 1.0;  // validation exact match that ends training early
    int stop_patience = 2;       // consecutive evaluations at stop_accuracy
    double time_budget_s = 0;    // 0 means unlimited
    std::uint64_t seed = 0;
};

struct CurvePoint {
    int step = 0;
    double loss = 0;
    double val_accuracy = -1;  // negative when not evaluated at this step
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    int steps = 0;
    bool stopped_early = false;
};

// Trains on a fresh stream of generated instances of the split's level, never
// emitting an instance that appears in the split's test partition.
TrainResult train_model(Model& model, const DatasetSplit& split, const TrainConfig& config);

// Fraction of records whose Output (chain and terminator) is reproduced
// exactly. Uses teacher-forced argmax agreement, which is equivalent to greedy
// decoding: greedy reproduces the gold tokens iff every argmax under the gold
// prefix is the gold next token.
double evaluate_exact_match(const Model& model, std::span<const Record> records,
                            int batch_size = 256);

// Greedy decoding from the prompt until ';' is produced. Throws
// BudgetExceeded if max_new tokens pass (or the context fills) first.
std::vector<int> generate_greedy(const Model& model, std::span<const int> prompt, int max_new = 64);

// Per-position argmax agreement of a forced reference continuation.
std::vector<bool> forced_agreement(const Model& model, std::span<const int> prompt,
                                   std::span<const int> reference);

void check_convergence(double accuracy, double threshold);  // throws DidNotConverge

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cotprobe
