#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <thread>

#include "cotprobe/backend.hpp"
#include "cotprobe/errors.hpp"

using namespace cotprobe;

namespace {

Model tiny_model() {
    ModelConfig c;
    c.layers = 2;
    c.width = 16;
    c.heads = 2;
    c.context = 96;
    c.seed = 11;
    Model m(c);
    Rng rng(5);
    for (float& p : m.params()) p += static_cast<float>(rng.normal() * 0.05);
    return m;
}

std::vector<int> seq(const char* text) {
    const Instance inst = parse_instance(text);
    return layout_record(inst, build_gold_chain(inst)).tokens;
}

std::vector<unsigned char> bytes(const std::string& s) { return {s.begin(), s.end()}; }

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("base64 matches the standard test vectors") {
    const std::pair<const char*, const char*> vectors[] = {
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
        {"foobar", "Zm9vYmFy"}};
    for (const auto& [plain, coded] : vectors) {
        CHECK(base64_encode(bytes(plain)) == coded);
        CHECK(base64_decode(coded) == bytes(plain));
    }
    std::vector<unsigned char> all(256);
    for (int i = 0; i < 256; ++i) all[static_cast<std::size_t>(i)] = static_cast<unsigned char>(i);
    CHECK(base64_decode(base64_encode(all)) == all);
}

TEST_CASE("local backend agrees with the model") {
    const Model model = tiny_model();
    LocalBackend backend(model, 2);
    const BackendInfo info = backend.info();
    CHECK(info.layers == 2);
    CHECK(info.width == 16);
    CHECK(info.vocab == kVocabSize);

    const std::vector<std::vector<int>> seqs = {seq("A=1+B,B=2;A=?"), seq("C=4-D,D=3;C=?"), seq("E=2+F,F=5;E=?")};
    const CaptureSpec spec{{3, 7, 20}, {0, 2}};
    const Capture<float> cap = backend.capture(seqs, spec);
    CHECK(cap.indices == spec.indices);
    CHECK(cap.layers == spec.layers);

    std::vector<SequenceLayout> lays;
    for (const auto& s : seqs) lays.push_back(SequenceLayout{s, 0, {}});
    Batch batch;
    batch.size = 3;
    batch.length = static_cast<int>(seqs[0].size());
    for (const auto& s : seqs) batch.tokens.insert(batch.tokens.end(), s.begin(), s.end());
    batch.loss_mask.assign(batch.tokens.size(), 0.0f);
    Capture<float> direct;
    const std::vector<float> logits = model.logits(batch, {}, &direct, &spec);
    CHECK(same_bits(cap.states, direct.states));

    const std::vector<float> row0(logits.begin(), logits.begin() + batch.length * kVocabSize);
    CHECK(same_bits(backend.logits(seqs[0]), row0));

    CHECK_THROWS_AS(backend.capture({seqs[0], seq("A=1+B,B=2+3;A=?")}, spec), MisalignedPositions);
}

TEST_CASE("self-patching leaves logits bitwise unchanged") {
    const Model model = tiny_model();
    LocalBackend backend(model);
    const std::vector<int> s = seq("A=1+B,B=2;A=?");
    const Capture<float> cap = backend.capture({s}, CaptureSpec{});
    PatchedRequest req;
    req.tokens = s;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        for (int l = 0; l <= 2; ++l) {
            const float* v = cap.at(0, i, l);
            req.patches.push_back({i, l, std::vector<float>(v, v + 16)});
        }
    }
    req.targets = {5, 20, static_cast<int>(s.size()) - 2};
    const auto out = backend.patched({req});
    const std::vector<float> clean = backend.logits(s);
    REQUIRE(out.size() == 1);
    std::vector<float> expected;
    for (int t : req.targets) {
        expected.insert(expected.end(), clean.begin() + t * kVocabSize, clean.begin() + (t + 1) * kVocabSize);
    }
    CHECK(same_bits(out[0], expected));

    req.patches[0].values.resize(3);
    CHECK_THROWS_AS(backend.patched({req}), GeometryMismatch);
}

TEST_CASE("http adapter round trip reproduces the local backend") {
    const Model model = tiny_model();
    LocalBackend local(model);
    AdapterServer server(local);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread th([&] { server.serve(); });

    {
        HttpBackend remote("http://127.0.0.1:" + std::to_string(port));
        const BackendInfo a = local.info();
        const BackendInfo b = remote.info();
        CHECK(a.layers == b.layers);
        CHECK(a.width == b.width);
        CHECK(a.context == b.context);
        CHECK(a.vocab == b.vocab);

        const std::vector<std::vector<int>> seqs = {seq("A=1+B,B=2;A=?"), seq("C=4-D,D=3;C=?")};
        const CaptureSpec spec{{1, 9}, {1}};
        const Capture<float> x = local.capture(seqs, spec);
        const Capture<float> y = remote.capture(seqs, spec);
        CHECK(y.indices == x.indices);
        CHECK(y.layers == x.layers);
        CHECK(same_bits(x.states, y.states));
        CHECK(same_bits(local.logits(seqs[1]), remote.logits(seqs[1])));

        PatchedRequest req;
        req.tokens = seqs[0];
        const float* v = local.capture({seqs[1]}, CaptureSpec{{4}, {2}}).at(0, 0, 0);
        req.patches.push_back({4, 2, std::vector<float>(v, v + 16)});
        req.targets = {4, 10};
        const auto p = local.patched({req});
        const auto q = remote.patched({req});
        REQUIRE(q.size() == 1);
        CHECK(same_bits(p[0], q[0]));

        req.patches[0].index = 500;
        CHECK_THROWS_AS(remote.patched({req}), AdapterError);
    }
    server.stop();
    th.join();

    CHECK_THROWS_AS(HttpBackend("http://127.0.0.1:" + std::to_string(port)), AdapterError);
    CHECK_THROWS_AS(HttpBackend("not a url"), AdapterError);
}
