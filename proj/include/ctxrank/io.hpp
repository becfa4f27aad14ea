#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>

namespace ctxrank {

/// Writes a file by streaming into `<path>.tmp` and renaming over `path`, so
/// readers never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& writer,
                       bool binary = false);

std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

/// Raises the allocator's mmap threshold (glibc only). Training creates many
/// short-lived matrices just above the default threshold, and mapping each
/// one fresh costs more than the arithmetic.
void configure_allocator();

void log_info(std::string_view message);
void log_warn(std::string_view message);

}  // namespace ctxrank
