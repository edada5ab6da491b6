#include "fgseg/pixmap.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "fgseg/errors.hpp"

namespace fgseg {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw DataError("truncated pixmap header in " + path.string());
  return tok;
}

int parse_dim(const std::string& tok, const char* what, const std::filesystem::path& path) {
  try {
    const int v = std::stoi(tok);
    if (v < 1) throw DataError(std::string("non-positive ") + what + " in " + path.string());
    return v;
  } catch (const DataError&) {
    throw;
  } catch (...) {
    throw DataError(std::string("bad ") + what + " '" + tok + "' in " + path.string());
  }
}

}  // namespace

Pixmap load_pixmap(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open pixmap: " + path.string());
  const std::string magic = next_token(is, path);
  Pixmap img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw DataError("unsupported pixmap magic '" + magic + "' in " + path.string() +
                    " (need binary P5 or P6)");
  }
  img.width = parse_dim(next_token(is, path), "width", path);
  img.height = parse_dim(next_token(is, path), "height", path);
  const std::string maxval = next_token(is, path);
  if (maxval != "255") {
    throw DataError("unsupported maxval " + maxval + " in " + path.string() +
                    " (only 8-bit pixmaps are supported)");
  }
  // next_token consumed exactly one whitespace byte after the maxval
  const std::size_t count =
      static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.data.resize(count);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(is.gcount()) != count) {
    throw DataError("truncated pixel payload in " + path.string());
  }
  return img;
}

void save_pixmap(const Pixmap& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("save_pixmap: channels must be 1 or 3");
  }
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw DataError("save_pixmap: payload size does not match dimensions");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open pixmap for writing: " + path.string());
  os << (img.channels == 1 ? "P5" : "P6") << "\n"
     << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size()));
  if (!os) throw DataError("write failed for pixmap: " + path.string());
}

}  // namespace fgseg
