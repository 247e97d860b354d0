#include "microbia/image.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "microbia/errors.hpp"

namespace microbia {

namespace {

void write_netpbm(const std::filesystem::path& path, const Image8& image, const char* magic,
                  std::size_t channels) {
  if (image.channels != channels)
    throw DataError("netpbm: " + path.string() + " expects " + std::to_string(channels) +
                    " channel(s), image has " + std::to_string(image.channels));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot open " + path.string() + " for writing");
  out << magic << "\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IngestionError("write failed: " + path.string());
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw IngestionError(path.string() + ": truncated netpbm header");
  return tok;
}

std::size_t parse_dim(const std::string& tok, const std::filesystem::path& path) {
  try {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(tok, &pos);
    if (pos != tok.size() || v == 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IngestionError(path.string() + ": bad netpbm header field '" + tok + "'");
  }
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image8& image) {
  write_netpbm(path, image, "P6", 3);
}

void write_pgm(const std::filesystem::path& path, const Image8& image) {
  write_netpbm(path, image, "P5", 1);
}

Image8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open image " + path.string());
  const std::string magic = next_token(in, path);
  std::size_t channels;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw IngestionError(path.string() + ": unsupported netpbm magic '" + magic + "'");
  const std::size_t width = parse_dim(next_token(in, path), path);
  const std::size_t height = parse_dim(next_token(in, path), path);
  if (parse_dim(next_token(in, path), path) != 255)
    throw IngestionError(path.string() + ": only 8-bit (maxval 255) images are supported");
  Image8 image(height, width, channels);
  in.read(reinterpret_cast<char*>(image.pixels.data()),
          static_cast<std::streamsize>(image.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != image.pixels.size())
    throw IngestionError(path.string() + ": truncated pixel data");
  return image;
}

}  // namespace microbia
