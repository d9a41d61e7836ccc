#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cotprobe/model.hpp"

namespace cotprobe {

// What probing and patching need from a model, built-in or remote. Token
// positions here are absolute indices into the sequence (0 = BOS).
struct BackendInfo {
    int layers = 0;  // transformer blocks; states exist for l = 0..layers
    int width = 0;
    int context = 0;
    int vocab = 0;
};

struct PatchEntry {
    int index = 0;
    int layer = 0;
    std::vector<float> values;
};

struct PatchedRequest {
    std::vector<int> tokens;
    std::vector<PatchEntry> patches;
    std::vector<int> targets;  // positions whose logits are returned
};

class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual BackendInfo info() const = 0;

    // Residual states of equal-length sequences at the selected indices and
    // layers (empty selection = all), laid out as in Capture.
    virtual Capture<float> capture(const std::vector<std::vector<int>>& seqs, const CaptureSpec& spec) = 0;

    // Logits for every position of one sequence, [index][vocab].
    virtual std::vector<float> logits(std::span<const int> tokens) = 0;

    // Per request: logits [target][vocab] after the patches are applied.
    virtual std::vector<std::vector<float>> patched(const std::vector<PatchedRequest>& requests) = 0;
};

// Runs the built-in transformer in process. Batches requests internally.
class LocalBackend : public ModelBackend {
public:
    explicit LocalBackend(const Model& model, int batch_size = 64);
    BackendInfo info() const override;
    Capture<float> capture(const std::vector<std::vector<int>>& seqs, const CaptureSpec& spec) override;
    std::vector<float> logits(std::span<const int> tokens) override;
    std::vector<std::vector<float>> patched(const std::vector<PatchedRequest>& requests) override;

private:
    const Model& model_;
    int batch_size_;
};

// Client for an external model served over HTTP with JSON bodies:
//   GET  /info      -> {layers, width, context, vocab}
//   POST /capture   {tokens} or {sequences, indices?, layers?}
//                   -> {shape:[n, indices, layers, width], states: base64 f32 LE, logits?}
//   POST /patched   {tokens, patches:[{t, l, vector}], target_t | targets}
//                   -> {logits: [[...], ...]}
// Patch coordinates t are absolute indices. Errors surface as AdapterError.
class HttpBackend : public ModelBackend {
public:
    explicit HttpBackend(const std::string& url);
    BackendInfo info() const override;
    Capture<float> capture(const std::vector<std::vector<int>>& seqs, const CaptureSpec& spec) override;
    std::vector<float> logits(std::span<const int> tokens) override;
    std::vector<std::vector<float>> patched(const std::vector<PatchedRequest>& requests) override;

private:
    std::string host_;
    int port_ = 80;
    std::string prefix_;
    BackendInfo info_;
};

// Serves a backend with the protocol above. serve() blocks until stop() is
// called from another thread.
class AdapterServer {
public:
    explicit AdapterServer(ModelBackend& backend);
    ~AdapterServer();
    AdapterServer(const AdapterServer&) = delete;
    AdapterServer& operator=(const AdapterServer&) = delete;

    int bind(const std::string& host, int port);  // port 0 picks a free port; returns the bound one
    void serve();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(std::string_view text);

}  // namespace cotprobe
