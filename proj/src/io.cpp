#include "ctxrank/io.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ctxrank/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ctxrank {

void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& writer, bool binary) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, binary ? std::ios::out | std::ios::binary : std::ios::out);
        if (!out) {
            throw DataError("cannot open \"" + tmp.string() + "\" for writing");
        }
        writer(out);
        out.flush();
        if (!out) {
            throw DataError("write failed for \"" + tmp.string() + "\"");
        }
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open \"" + path.string() + "\"");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void configure_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 128 << 20);
#endif
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

void log_info(std::string_view message) { std::cerr << "[info] " << message << '\n'; }

void log_warn(std::string_view message) { std::cerr << "[warn] " << message << '\n'; }

}  // namespace ctxrank
