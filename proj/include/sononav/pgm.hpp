#pragma once

// Binary PGM (P5, maxval 255) reading and writing.

#include <cctype>
#include <fstream>
#include <istream>
#include <string>

#include "sononav/common.hpp"

namespace sononav {

inline void write_pgm(std::ostream& os, const Image& img) {
  os << "P5\n" << img.cols << " " << img.rows << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw Error("failed writing PGM");
}

inline void write_pgm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  write_pgm(os, img);
}

namespace detail {

inline int pgm_int(std::istream& is) {
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw InvalidArgument("malformed PGM header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 20) throw InvalidArgument("PGM dimension too large");
    c = is.get();
  }
  return v;
}

}  // namespace detail

inline Image read_pgm(std::istream& is) {
  char magic[2] = {};
  is.read(magic, 2);
  if (is.gcount() != 2 || magic[0] != 'P' || magic[1] != '5') throw InvalidArgument("not a binary PGM (P5)");
  int cols = detail::pgm_int(is);
  int rows = detail::pgm_int(is);
  int maxval = detail::pgm_int(is);
  if (maxval != 255) throw InvalidArgument("only 8-bit PGM is supported");
  if (rows <= 0 || cols <= 0) throw InvalidArgument("empty PGM");
  Image img(rows, cols);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.pixels.size()) throw InvalidArgument("truncated PGM payload");
  return img;
}

inline Image read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open image: " + path);
  return read_pgm(is);
}

}  // namespace sononav
