#include "vground/array.hpp"

namespace vground {

namespace detail {

std::string& corrupt_op_slot() {
    static std::string slot;
    return slot;
}

}  // namespace detail

void set_backward_corruption(std::string_view op_name) { detail::corrupt_op_slot() = std::string(op_name); }

void clear_backward_corruption() { detail::corrupt_op_slot().clear(); }

}  // namespace vground
