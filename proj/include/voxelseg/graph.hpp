#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "voxelseg/tensor.hpp"

namespace voxelseg {

struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

enum class OpKind : std::uint8_t {
    input,
    conv,       // valid cross-correlation, weight/bias parameters
    relu,
    avg_pool,   // per-axis window/stride
    bilinear_up, // fixed-tap transposed conv, stride 2 on selected axes
    center_crop,
    concat_crop, // crop first input's spatial dims to second's, concat channels
    softmax,     // per-voxel channel softmax
};

struct Node {
    OpKind kind = OpKind::input;
    int in0 = -1, in1 = -1;
    int weight = -1, bias = -1, taps = -1; // parameter indices
    std::array<int, 3> window{3, 3, 3};
    std::array<int, 3> stride{2, 2, 2};
    std::array<bool, 3> up_axes{true, true, true};
    std::array<int, 3> crop_to{0, 0, 0};
    std::string label;
};

/// An ordered DAG of layers with parameters. Built once by an architecture
/// builder, then executed forward/backward. One trainer may own a graph at a
/// time; concurrent read-only forward passes must use separate graph copies
/// (execution state lives inside the graph).
class NetworkGraph {
public:
    // -- construction -------------------------------------------------------
    int add_parameter(std::string name, Tensor t, bool trainable);
    int add_input(int channels, std::string label = "input");
    int add_conv(int src, int weight_param, int bias_param, std::string label);
    int add_relu(int src, std::string label = "");
    int add_avg_pool(int src, std::array<int, 3> window, std::array<int, 3> stride,
                     std::string label = "");
    int add_bilinear_up(int src, std::array<bool, 3> axes, std::string label = "");
    int add_center_crop(int src, std::array<int, 3> spatial, std::string label = "");
    int add_concat_crop(int a, int b, std::string label = "");
    int add_softmax(int src, std::string label = "");
    void set_output(int node) { output_ = node; }

    // -- introspection ------------------------------------------------------
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<Parameter>& parameters() { return params_; }
    int output_node() const { return output_; }
    int input_count() const { return int(input_nodes_.size()); }

    std::int64_t trainable_parameter_count() const;
    std::int64_t total_parameter_count() const;
    /// Number of conv nodes whose kernel satisfies the predicate (extents d,h,w).
    int count_convs(const std::function<bool(int, int, int)>& pred) const;

    /// Computes every node's output shape for the given input shapes; throws
    /// DataError when the arithmetic is inconsistent.
    std::vector<Shape> infer_shapes(std::span<const Shape> input_shapes) const;

    // -- execution (float, dispatched kernels) ------------------------------
    const Tensor& forward(std::span<const Tensor> inputs);
    /// Accumulates parameter gradients (and input gradients, retrievable via
    /// input_gradient) from dL/d(output). Requires a preceding forward.
    void backward(const Tensor& grad_output);
    void zero_parameter_gradients();
    const Tensor& node_value(int node) const { return values_[std::size_t(node)]; }
    const Tensor& input_gradient(int input_index) const;

    // -- checkpoints ---------------------------------------------------------
    // Single file, per parameter in graph order: header (name, shape,
    // trainable flag) + IEEE-754 binary32 little-endian payload.
    void save_checkpoint(const std::filesystem::path& file) const;
    void load_checkpoint(const std::filesystem::path& file);

private:
    int add_node(Node n);
    std::vector<Parameter> params_;
    std::vector<Node> nodes_;
    std::vector<int> input_nodes_;
    std::vector<int> input_channels_;
    int output_ = -1;

    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    bool have_forward_ = false;
};

/// Double-precision mirror of a graph's execution; same node semantics, no
/// float32 storage rounding. Used by the grad-check harness and by tests that
/// pin the float engine against a higher-precision reference.
class DoubleExec {
public:
    explicit DoubleExec(const NetworkGraph& g);
    const DTensor& forward(std::span<const DTensor> inputs);
    void backward(const DTensor& grad_output);
    const DTensor& output() const;
    const DTensor& input_gradient(int input_index) const;
    std::vector<DTensor>& param_values() { return dparams_; }
    const DTensor& param_gradient(int param_index) const {
        return dparam_grads_[std::size_t(param_index)];
    }

private:
    const NetworkGraph& g_;
    std::vector<DTensor> dparams_;
    std::vector<DTensor> dparam_grads_;
    std::vector<DTensor> values_;
    std::vector<DTensor> grads_;
};

} // namespace voxelseg
