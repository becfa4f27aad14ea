#pragma once

#include <filesystem>
#include <random>
#include <string>

namespace fixtures {

// Topic 697 from the Robust04 topic set, in the classic topic-file layout.
inline const std::string topic_697 =
    "<top>\n"
    "<num> Number: 697\n"
    "<title> air traffic controller\n"
    "\n"
    "<desc> Description:\n"
    "What are working conditions and pay for U.S. air traffic controllers?\n"
    "\n"
    "<narr> Narrative:\n"
    "Relevant documents tell something about working conditions or pay for\n"
    "American controllers.  Documents about foreign controllers or individuals\n"
    "are not relevant.\n"
    "</top>\n";

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& prefix) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (prefix + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace fixtures
