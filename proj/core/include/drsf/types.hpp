#pragma once

#include <string_view>

namespace drsf {

/// Training mode uses batch statistics and exposes auxiliary branches; eval is read-only.
enum class Mode { train, eval };

enum class TaskMode { classification, segmentation };

TaskMode parse_task_mode(std::string_view text);
std::string_view to_string(TaskMode mode) noexcept;

}  // namespace drsf
