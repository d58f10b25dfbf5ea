#ifndef MEGA_IMAGE_IO_HPP
#define MEGA_IMAGE_IO_HPP

#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mega/tensor.hpp"

// All OpenCV usage lives in this header; the rest of the library sees only
// Tensor images (3 x H x W, RGB, values in [0,1]).

namespace mega {

inline Tensor image_from_mat(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    const int H = rgb.rows, W = rgb.cols;
    Tensor t({3, H, W});
    for (int y = 0; y < H; ++y) {
        const cv::Vec3b* row = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                t.data[(static_cast<std::size_t>(c) * H + y) * W + x] = row[x][c] / 255.0;
    }
    return t;
}

inline cv::Mat mat_from_image(const Tensor& img) {
    require(img.shape.rank == 3 && img.shape.d[0] == 3, "mat_from_image: expected 3 x H x W image");
    int H = img.shape.d[1], W = img.shape.d[2];
    cv::Mat rgb(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y) {
        cv::Vec3b* row = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = img.data[(static_cast<std::size_t>(c) * H + y) * W + x];
                v = std::min(std::max(v, 0.0), 1.0);
                row[x][c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
    }
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

// Returns an empty tensor when the file cannot be decoded; callers decide
// whether that is a warning or fatal.
inline Tensor load_image_chw(const std::string& path, int resize_to = 0) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) return Tensor();
    if (resize_to > 0 && (m.rows != resize_to || m.cols != resize_to))
        cv::resize(m, m, cv::Size(resize_to, resize_to), 0, 0,
                   (m.rows > resize_to) ? cv::INTER_AREA : cv::INTER_LINEAR);
    return image_from_mat(m);
}

namespace detail {
inline void write_mat_or_die(const std::string& path, const cv::Mat& m) {
    bool ok = false;
    try {
        ok = cv::imwrite(path, m);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) fatal("cannot write image: " + path);
}
}  // namespace detail

inline void save_image_chw(const std::string& path, const Tensor& img) {
    detail::write_mat_or_die(path, mat_from_image(img));
}

// Grayscale dump of an H x W (or 1 x H x W) array in [0,1].
inline void save_gray_image(const std::string& path, const Tensor& gray) {
    int H, W;
    if (gray.shape.rank == 2) {
        H = gray.shape.d[0];
        W = gray.shape.d[1];
    } else if (gray.shape.rank == 3 && gray.shape.d[0] == 1) {
        H = gray.shape.d[1];
        W = gray.shape.d[2];
    } else {
        fatal("save_gray_image: expected H x W or 1 x H x W, got " + gray.shape.str());
        return;
    }
    cv::Mat m(H, W, CV_8UC1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double v = gray.data[static_cast<std::size_t>(y) * W + x];
            v = std::min(std::max(v, 0.0), 1.0);
            m.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    detail::write_mat_or_die(path, m);
}

enum class BorderColor { none, blue, green, red };

// Horizontal strip of equally sized images with colored borders, used for
// retrieval result figures. Images are upscaled so toy resolutions stay legible.
inline void save_image_strip(const std::string& path, const std::vector<std::pair<Tensor, BorderColor>>& cells,
                             int border_px = 3, int gap_px = 6, int upscale = 3) {
    require(!cells.empty(), "save_image_strip: no cells");
    int H = cells[0].first.shape.d[1] * upscale, W = cells[0].first.shape.d[2] * upscale;
    int cell_h = H + 2 * border_px, cell_w = W + 2 * border_px;
    int total_w = static_cast<int>(cells.size()) * cell_w + (static_cast<int>(cells.size()) - 1) * gap_px;
    cv::Mat canvas(cell_h, total_w, CV_8UC3, cv::Scalar(255, 255, 255));
    int x0 = 0;
    for (const auto& [img, color] : cells) {
        require(img.shape.d[1] * upscale == H && img.shape.d[2] * upscale == W,
                "save_image_strip: mixed cell sizes");
        cv::Scalar bgr;
        switch (color) {
            case BorderColor::blue: bgr = cv::Scalar(255, 64, 0); break;
            case BorderColor::green: bgr = cv::Scalar(0, 200, 0); break;
            case BorderColor::red: bgr = cv::Scalar(0, 0, 230); break;
            default: bgr = cv::Scalar(255, 255, 255); break;
        }
        cv::rectangle(canvas, cv::Rect(x0, 0, cell_w, cell_h), bgr, cv::FILLED);
        cv::Mat up;
        cv::resize(mat_from_image(img), up, cv::Size(W, H), 0, 0, cv::INTER_NEAREST);
        up.copyTo(canvas(cv::Rect(x0 + border_px, border_px, W, H)));
        x0 += cell_w + gap_px;
    }
    detail::write_mat_or_die(path, canvas);
}

}  // namespace mega

#endif
