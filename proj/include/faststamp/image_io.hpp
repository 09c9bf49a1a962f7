#pragma once

#include "faststamp/image.hpp"

#include <stdexcept>
#include <string>

namespace faststamp {

enum class ImageIoErrorKind { Io, BadFormat, Unsupported, Truncated };

class ImageIoError : public std::runtime_error {
 public:
  ImageIoError(ImageIoErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  ImageIoErrorKind kind;
};

/// Reads a PNG (8-bit RGB, no interlace) or binary PPM (P6, maxval 255),
/// detected by magic bytes. Round-trips through write_image are lossless.
ImageU8 read_image(const std::string& path);

/// Writes PNG or PPM depending on the file extension (.png / .ppm).
void write_image(const std::string& path, const ImageU8& img);

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

}  // namespace faststamp
