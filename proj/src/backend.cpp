#include "cotprobe/backend.hpp"

#include <algorithm>
#include <cstring>
#include <map>
#include <mutex>

#include "httplib.h"
#include "json.hpp"

namespace cotprobe {

using json = nlohmann::json;

// ---- base64 -------------------------------------------------------------------

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string floats_to_b64(std::span<const float> v) {
    return base64_encode({reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(float)});
}

std::vector<float> b64_to_floats(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % sizeof(float) != 0) throw AdapterError("state payload is not a whole number of floats");
    std::vector<float> out(bytes.size() / sizeof(float));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace

std::string base64_encode(std::span<const unsigned char> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest > 0) {
        unsigned v = bytes[i] << 16;
        if (rest == 2) v |= bytes[i + 1] << 8;
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += rest == 2 ? kB64[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
    int table[256];
    std::fill(std::begin(table), std::end(table), -1);
    for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(kB64[i])] = i;
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    unsigned acc = 0;
    int bits = 0;
    for (const char c : text) {
        if (c == '=') break;
        const int v = table[static_cast<unsigned char>(c)];
        if (v < 0) throw AdapterError("invalid base64 payload");
        acc = (acc << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

// ---- local backend -------------------------------------------------------------

LocalBackend::LocalBackend(const Model& model, int batch_size) : model_(model), batch_size_(batch_size) {}

BackendInfo LocalBackend::info() const {
    const ModelConfig& c = model_.config();
    return {c.layers, c.width, c.context, kVocabSize};
}

namespace {

// prefix > 0 keeps only the first prefix tokens of each row.
Batch plain_batch(const std::vector<std::vector<int>>& seqs, std::size_t begin, std::size_t end, int prefix = 0) {
    Batch b;
    b.size = static_cast<int>(end - begin);
    const int length = static_cast<int>(seqs[begin].size());
    b.length = prefix > 0 ? std::min(prefix, length) : length;
    for (std::size_t r = begin; r < end; ++r) {
        if (static_cast<int>(seqs[r].size()) != length) {
            throw MisalignedPositions("sequences in one capture must share a length");
        }
        b.tokens.insert(b.tokens.end(), seqs[r].begin(), seqs[r].begin() + b.length);
    }
    b.loss_mask.assign(b.tokens.size(), 0.0f);
    return b;
}

}  // namespace

Capture<float> LocalBackend::capture(const std::vector<std::vector<int>>& seqs, const CaptureSpec& spec) {
    Capture<float> out;
    out.width = model_.config().width;
    if (seqs.empty()) return out;
    // States at index i only depend on tokens up to i, so the tail is skipped.
    int prefix = 0;
    if (!spec.indices.empty()) {
        const int last = *std::max_element(spec.indices.begin(), spec.indices.end());
        const int first = *std::min_element(spec.indices.begin(), spec.indices.end());
        if (first >= 0 && last < static_cast<int>(seqs.front().size())) prefix = last + 1;
    }
    for (std::size_t start = 0; start < seqs.size(); start += static_cast<std::size_t>(batch_size_)) {
        const std::size_t end = std::min(seqs.size(), start + static_cast<std::size_t>(batch_size_));
        Capture<float> part;
        model_.logits(plain_batch(seqs, start, end, prefix), {}, &part, &spec);
        if (start == 0) {
            out.indices = part.indices;
            out.layers = part.layers;
            out.states.reserve(part.states.size() / (end - start) * seqs.size());
        }
        out.states.insert(out.states.end(), part.states.begin(), part.states.end());
    }
    return out;
}

std::vector<float> LocalBackend::logits(std::span<const int> tokens) {
    const std::vector<std::vector<int>> one{std::vector<int>(tokens.begin(), tokens.end())};
    return model_.logits(plain_batch(one, 0, 1));
}

std::vector<std::vector<float>> LocalBackend::patched(const std::vector<PatchedRequest>& requests) {
    const int width = model_.config().width;
    std::vector<std::vector<float>> out(requests.size());
    // Group equal-length requests so they share forward passes.
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < requests.size(); ++i) by_length[requests[i].tokens.size()].push_back(i);
    for (const auto& [length, ids] : by_length) {
        for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size_)) {
            const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(batch_size_));
            Batch b;
            b.size = static_cast<int>(end - start);
            b.length = static_cast<int>(length);
            std::vector<StatePatch<float>> patches;
            for (std::size_t r = start; r < end; ++r) {
                const PatchedRequest& req = requests[ids[r]];
                b.tokens.insert(b.tokens.end(), req.tokens.begin(), req.tokens.end());
                for (const PatchEntry& p : req.patches) {
                    if (static_cast<int>(p.values.size()) != width) {
                        throw GeometryMismatch("patch vector width " + std::to_string(p.values.size()) +
                                               " differs from model width " + std::to_string(width));
                    }
                    patches.push_back({static_cast<int>(r - start), p.index, p.layer, p.values.data()});
                }
            }
            b.loss_mask.assign(b.tokens.size(), 0.0f);
            const std::vector<float> z = model_.logits(b, patches);
            for (std::size_t r = start; r < end; ++r) {
                const PatchedRequest& req = requests[ids[r]];
                auto& dst = out[ids[r]];
                for (const int t : req.targets) {
                    if (t < 0 || t >= b.length) throw PatchOutOfRange("target index outside the run");
                    const float* row = z.data() + (static_cast<std::size_t>(r - start) * b.length + t) * kVocabSize;
                    dst.insert(dst.end(), row, row + kVocabSize);
                }
            }
        }
    }
    return out;
}

// ---- HTTP client ----------------------------------------------------------------

namespace {

constexpr std::size_t kHttpChunk = 64;

json post(const std::string& host, int port, const std::string& path, const json& body) {
    httplib::Client client(host, port);
    client.set_connection_timeout(10);
    client.set_read_timeout(600);
    client.set_write_timeout(600);
    const auto res = client.Post(path, body.dump(), "application/json");
    if (!res) throw AdapterError("request to " + path + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw AdapterError("adapter answered " + std::to_string(res->status) + " on " + path + ": " + res->body);
    }
    try {
        return json::parse(res->body);
    } catch (const json::exception& e) {
        throw AdapterError(std::string("malformed adapter response: ") + e.what());
    }
}

}  // namespace

HttpBackend::HttpBackend(const std::string& url) {
    std::string rest = url;
    const std::string scheme = "http://";
    if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
    else if (rest.find("://") != std::string::npos) throw ConfigError("only http:// adapter URLs are supported");
    const auto slash = rest.find('/');
    if (slash != std::string::npos) {
        prefix_ = rest.substr(slash);
        if (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
        rest = rest.substr(0, slash);
    }
    const auto colon = rest.rfind(':');
    if (colon != std::string::npos) {
        try {
            port_ = std::stoi(rest.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError("bad port in adapter URL " + url);
        }
        rest = rest.substr(0, colon);
    }
    host_ = rest;
    if (host_.empty()) throw ConfigError("adapter URL has no host: " + url);

    httplib::Client client(host_, port_);
    client.set_connection_timeout(10);
    const auto res = client.Get(prefix_ + "/info");
    if (!res || res->status != 200) throw AdapterError("adapter at " + url + " did not answer /info");
    try {
        const json j = json::parse(res->body);
        info_ = {j.at("layers").get<int>(), j.at("width").get<int>(), j.at("context").get<int>(),
                 j.at("vocab").get<int>()};
    } catch (const json::exception& e) {
        throw AdapterError(std::string("malformed /info response: ") + e.what());
    }
}

BackendInfo HttpBackend::info() const { return info_; }

Capture<float> HttpBackend::capture(const std::vector<std::vector<int>>& seqs, const CaptureSpec& spec) {
    Capture<float> out;
    out.width = info_.width;
    for (std::size_t start = 0; start < seqs.size(); start += kHttpChunk) {
        const std::size_t end = std::min(seqs.size(), start + kHttpChunk);
        json body;
        body["sequences"] = std::vector<std::vector<int>>(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                                          seqs.begin() + static_cast<std::ptrdiff_t>(end));
        if (!spec.indices.empty()) body["indices"] = spec.indices;
        if (!spec.layers.empty()) body["layers"] = spec.layers;
        const json res = post(host_, port_, prefix_ + "/capture", body);
        try {
            const auto shape = res.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 4 || shape[0] != end - start || shape[3] != static_cast<std::size_t>(info_.width)) {
                throw AdapterError("capture shape does not match the request");
            }
            if (start == 0) {
                out.indices = res.at("indices").get<std::vector<int>>();
                out.layers = res.at("layers").get<std::vector<int>>();
            }
            const auto states = b64_to_floats(res.at("states").get<std::string>());
            if (states.size() != shape[0] * shape[1] * shape[2] * shape[3]) {
                throw AdapterError("capture payload size does not match its shape");
            }
            out.states.insert(out.states.end(), states.begin(), states.end());
        } catch (const json::exception& e) {
            throw AdapterError(std::string("malformed /capture response: ") + e.what());
        }
    }
    return out;
}

std::vector<float> HttpBackend::logits(std::span<const int> tokens) {
    json body;
    body["tokens"] = std::vector<int>(tokens.begin(), tokens.end());
    body["layers"] = std::vector<int>{0};
    body["indices"] = std::vector<int>{0};
    const json res = post(host_, port_, prefix_ + "/capture", body);
    try {
        auto z = b64_to_floats(res.at("logits").get<std::string>());
        if (z.size() != tokens.size() * static_cast<std::size_t>(info_.vocab)) {
            throw AdapterError("logits payload size does not match the sequence");
        }
        return z;
    } catch (const json::exception& e) {
        throw AdapterError(std::string("malformed /capture response: ") + e.what());
    }
}

std::vector<std::vector<float>> HttpBackend::patched(const std::vector<PatchedRequest>& requests) {
    std::vector<std::vector<float>> out;
    out.reserve(requests.size());
    for (const PatchedRequest& req : requests) {
        json body;
        body["tokens"] = req.tokens;
        body["targets"] = req.targets;
        json patches = json::array();
        for (const PatchEntry& p : req.patches) {
            patches.push_back({{"t", p.index}, {"l", p.layer}, {"vector", p.values}});
        }
        body["patches"] = std::move(patches);
        const json res = post(host_, port_, prefix_ + "/patched", body);
        try {
            std::vector<float> flat;
            for (const auto& row : res.at("logits")) {
                const auto v = row.get<std::vector<float>>();
                flat.insert(flat.end(), v.begin(), v.end());
            }
            if (flat.size() != req.targets.size() * static_cast<std::size_t>(info_.vocab)) {
                throw AdapterError("patched logits do not match the requested targets");
            }
            out.push_back(std::move(flat));
        } catch (const json::exception& e) {
            throw AdapterError(std::string("malformed /patched response: ") + e.what());
        }
    }
    return out;
}

// ---- server -------------------------------------------------------------------

struct AdapterServer::Impl {
    ModelBackend& backend;
    httplib::Server server;
    std::mutex mutex;  // the backend is driven by one request at a time
};

namespace {

void reply_error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(json{{"error", message}}.dump(), "application/json");
}

}  // namespace

AdapterServer::AdapterServer(ModelBackend& backend) : impl_(new Impl{backend, {}, {}}) {
    Impl& s = *impl_;
    s.server.Get("/info", [&s](const httplib::Request&, httplib::Response& res) {
        const BackendInfo i = s.backend.info();
        res.set_content(json{{"layers", i.layers}, {"width", i.width}, {"context", i.context}, {"vocab", i.vocab}}.dump(),
                        "application/json");
    });
    s.server.Post("/capture", [&s](const httplib::Request& req, httplib::Response& res) {
        try {
            const json body = json::parse(req.body);
            std::vector<std::vector<int>> seqs;
            const bool single = body.contains("tokens");
            if (single) seqs.push_back(body.at("tokens").get<std::vector<int>>());
            else seqs = body.at("sequences").get<std::vector<std::vector<int>>>();
            CaptureSpec spec;
            if (body.contains("indices")) spec.indices = body.at("indices").get<std::vector<int>>();
            if (body.contains("layers")) spec.layers = body.at("layers").get<std::vector<int>>();
            std::lock_guard lock(s.mutex);
            const Capture<float> cap = s.backend.capture(seqs, spec);
            json out;
            out["shape"] = {seqs.size(), cap.indices.size(), cap.layers.size(), static_cast<std::size_t>(cap.width)};
            out["indices"] = cap.indices;
            out["layers"] = cap.layers;
            out["states"] = floats_to_b64(cap.states);
            if (single) {
                out["logits"] = floats_to_b64(s.backend.logits(seqs.front()));
                out["logits_shape"] = {seqs.front().size(), static_cast<std::size_t>(s.backend.info().vocab)};
            }
            res.set_content(out.dump(), "application/json");
        } catch (const UserError& e) {
            reply_error(res, 400, e.what());
        } catch (const json::exception& e) {
            reply_error(res, 400, e.what());
        } catch (const std::exception& e) {
            reply_error(res, 500, e.what());
        }
    });
    s.server.Post("/patched", [&s](const httplib::Request& req, httplib::Response& res) {
        try {
            const json body = json::parse(req.body);
            PatchedRequest pr;
            pr.tokens = body.at("tokens").get<std::vector<int>>();
            if (body.contains("targets")) pr.targets = body.at("targets").get<std::vector<int>>();
            else pr.targets = {body.at("target_t").get<int>()};
            for (const auto& p : body.at("patches")) {
                pr.patches.push_back({p.at("t").get<int>(), p.at("l").get<int>(), p.at("vector").get<std::vector<float>>()});
            }
            std::lock_guard lock(s.mutex);
            const auto z = s.backend.patched({pr});
            const auto vocab = static_cast<std::size_t>(s.backend.info().vocab);
            json rows = json::array();
            for (std::size_t k = 0; k < pr.targets.size(); ++k) {
                const auto first = z.front().begin() + static_cast<std::ptrdiff_t>(k * vocab);
                rows.push_back(std::vector<float>(first, first + static_cast<std::ptrdiff_t>(vocab)));
            }
            res.set_content(json{{"logits", rows}}.dump(), "application/json");
        } catch (const UserError& e) {
            reply_error(res, 400, e.what());
        } catch (const json::exception& e) {
            reply_error(res, 400, e.what());
        } catch (const std::exception& e) {
            reply_error(res, 500, e.what());
        }
    });
}

AdapterServer::~AdapterServer() { stop(); }

int AdapterServer::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw AdapterError("cannot bind " + host);
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port)) throw AdapterError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void AdapterServer::serve() { impl_->server.listen_after_bind(); }

void AdapterServer::stop() {
    if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace cotprobe
