#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sononav {

// Base for all library errors. Callers that only care about failure catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A file or directory the operation depends on does not exist.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

inline constexpr int kImageRows = 150;
inline constexpr int kImageCols = 150;

// 8-bit B-mode image, row-major, row 0 at the transducer face.
struct Image {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int r, int c, std::uint8_t fill = 0)
      : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c, fill) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

  bool operator==(const Image&) const = default;
};

// splitmix64 finalizer; used to derive independent stream seeds from one root seed.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sononav
