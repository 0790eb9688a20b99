#pragma once

#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnvat::autodiff {

using NodeId = int;

inline std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense n-dimensional array of doubles. Payloads are immutable once built;
// copies share storage. A tensor recorded on a Tape additionally carries the
// id of its node so gradients can be looked up after backward().
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))),
          requires_grad_(requires_grad) {
        std::size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in " + shape_string(shape_));
            n *= static_cast<std::size_t>(d);
        }
        if (n != data_->size()) {
            throw std::invalid_argument("Tensor: shape " + shape_string(shape_) + " does not match " +
                                        std::to_string(data_->size()) + " values");
        }
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v), requires_grad);
    }

    static Tensor matrix(int rows, int cols, std::vector<double> v, bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(v), requires_grad);
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d > 0 ? d : 0);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    const std::vector<int>& shape() const { return shape_; }
    const std::vector<double>& values() const { return *data_; }
    int numel() const { return static_cast<int>(data_ ? data_->size() : 0); }
    bool defined() const { return static_cast<bool>(data_); }

    double value() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " + shape_string(shape_));
        return (*data_)[0];
    }

    double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // 2-D accessor: element (r, c) of a [R x C] tensor.
    double at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c]; }

    int rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : shape_[0]); }
    int cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) { requires_grad_ = v; }

    NodeId node_id() const { return node_id_; }
    bool on_tape() const { return node_id_ >= 0; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double v : *data_) s += v * v;
        return std::sqrt(s);
    }

private:
    friend class Tape;
    friend class GradientMap;

    std::vector<double>& mutable_values() { return *data_; }
    void bind(NodeId id, std::uint64_t tape_id) {
        node_id_ = id;
        tape_id_ = tape_id;
    }
    std::uint64_t tape_id() const { return tape_id_; }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    NodeId node_id_ = -1;
    std::uint64_t tape_id_ = 0;
};

}  // namespace attnvat::autodiff
