#include "hsf/png_io.hpp"

#include <png.h>

#include <cstring>

#include "hsf/errors.hpp"

// Uses the libpng "simplified" API, which reports failures through return
// codes instead of longjmp.
namespace hsf {

Raster8 read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("no such file: " + path.string());

  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0)
    throw FormatError(path.string() + ": " + image.message);

  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  Raster8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Raster8& raster) {
  if (raster.channels != 1 && raster.channels != 3)
    throw FormatError("write_png supports 1 or 3 channels");
  if (raster.pixels.size() !=
      static_cast<std::size_t>(raster.width) * raster.height * raster.channels)
    throw FormatError("write_png: pixel buffer does not match dimensions");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());

  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  image.format = raster.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&image, path.c_str(), 0, raster.pixels.data(), 0, nullptr) == 0)
    throw IoError(path.string() + ": " + image.message);
}

}  // namespace hsf
