#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcmle/errors.hpp"

namespace mcmle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Names the coordinates of a parameter vector as contiguous blocks, e.g.
/// `beta` (fixed effects) followed by `delta` (square-root variance
/// components). Coordinate labels are the block name plus a 1-based index.
class ParamLayout {
 public:
  struct Block {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  ParamLayout() = default;

  explicit ParamLayout(std::vector<Block> blocks) : blocks_(std::move(blocks)) {
    std::size_t next = 0;
    for (const auto& b : blocks_) {
      if (b.offset != next) throw InvalidInput("parameter layout blocks must be contiguous");
      next += b.size;
    }
    size_ = next;
  }

  static ParamLayout generic(std::size_t d) { return ParamLayout({{"theta", 0, d}}); }

  std::size_t size() const noexcept { return size_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }

  const Block* find_block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return &b;
    return nullptr;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    out.reserve(size_);
    for (const auto& b : blocks_)
      for (std::size_t k = 0; k < b.size; ++k) out.push_back(b.name + std::to_string(k + 1));
    return out;
  }

  std::optional<std::size_t> index_of(const std::string& label) const {
    const auto all = labels();
    for (std::size_t i = 0; i < all.size(); ++i)
      if (all[i] == label) return i;
    return std::nullopt;
  }

 private:
  std::vector<Block> blocks_;
  std::size_t size_ = 0;
};

/// Parameter values together with the layout that names them.
struct ParamVector {
  Vector values;
  std::shared_ptr<const ParamLayout> layout;

  ParamVector() = default;

  explicit ParamVector(Vector v, std::shared_ptr<const ParamLayout> l = nullptr)
      : values(std::move(v)), layout(std::move(l)) {
    if (!layout) layout = std::make_shared<const ParamLayout>(ParamLayout::generic(values.size()));
    if (layout->size() != static_cast<std::size_t>(values.size()))
      throw InvalidInput("parameter vector length does not match its layout");
  }

  Eigen::Index size() const noexcept { return values.size(); }
  std::vector<std::string> labels() const { return layout->labels(); }
};

}  // namespace mcmle
