#include "hybridvfl/image_io.hpp"

#include <algorithm>

#ifdef HVFL_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

namespace hvfl {

#ifdef HVFL_HAVE_OPENCV

bool image_io_available() { return true; }

Tensor decode_image(const std::string& path, std::size_t target_size) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);  // BGR u8
    if (img.empty()) {
        throw IngestionError("unreadable image: " + path);
    }
    if (target_size != 0 &&
        (img.rows != static_cast<int>(target_size) || img.cols != static_cast<int>(target_size))) {
        cv::Mat resized;
        const int interp = (img.rows > static_cast<int>(target_size)) ? cv::INTER_AREA
                                                                      : cv::INTER_LINEAR;
        cv::resize(img, resized, cv::Size(static_cast<int>(target_size),
                                          static_cast<int>(target_size)),
                   0, 0, interp);
        img = resized;
    }
    const std::size_t h = img.rows, w = img.cols;
    Tensor out(Shape{3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < w; ++x) {
            // BGR -> RGB channel planes
            out[(0 * h + y) * w + x] = row[x][2] / 255.0;
            out[(1 * h + y) * w + x] = row[x][1] / 255.0;
            out[(2 * h + y) * w + x] = row[x][0] / 255.0;
        }
    }
    return out;
}

void encode_png(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw IngestionError("encode_png: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t h = image.dim(1), w = image.dim(2);
    cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (std::size_t y = 0; y < h; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < w; ++x) {
            auto q = [&](std::size_t c) {
                double v = image[(c * h + y) * w + x];
                v = std::clamp(v, 0.0, 1.0);
                return static_cast<unsigned char>(v * 255.0 + 0.5);
            };
            row[x] = cv::Vec3b(q(2), q(1), q(0));  // RGB -> BGR
        }
    }
    if (!cv::imwrite(path, img)) {
        throw IngestionError("encode_png: could not write " + path);
    }
}

#else

bool image_io_available() { return false; }

Tensor decode_image(const std::string& path, std::size_t) {
    throw IngestionError("image codec unavailable in this build, cannot read " + path);
}

void encode_png(const std::string& path, const Tensor&) {
    throw IngestionError("image codec unavailable in this build, cannot write " + path);
}

#endif

}  // namespace hvfl
