#include "cotprobe/hashing.hpp"

#include <fstream>
#include <iterator>

#include "cotprobe/errors.hpp"

namespace cotprobe {

std::string file_fingerprint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read " + path.string());
    Fnv1a h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
    }
    return h.hex();
}

}  // namespace cotprobe
