#include "drsf/types.hpp"

#include <string>

#include "drsf/tensor.hpp"

namespace drsf {

TaskMode parse_task_mode(std::string_view text) {
  if (text == "classification") return TaskMode::classification;
  if (text == "segmentation") return TaskMode::segmentation;
  throw InvalidArgument("unknown task mode: " + std::string(text));
}

std::string_view to_string(TaskMode mode) noexcept {
  return mode == TaskMode::classification ? "classification" : "segmentation";
}

}  // namespace drsf
