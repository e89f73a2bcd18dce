#pragma once
// Training configuration and its flat key = value file format.
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cellstn/stn.hpp"

namespace cellstn {

struct StageSchedule {
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
};

struct TrainConfig {
  CropGeometry geom;
  double kappa = 1.0;
  StageSchedule stage1{50, 1e-3};
  StageSchedule stage2{200, 1e-4};
  StageSchedule stage3{100, 1e-4};
  StageSchedule baseline{200, 1e-3};
  std::size_t batch_size = 32;
  std::size_t folds = 5;
  std::uint64_t seed = 1;
  std::size_t localizer_stride = 2;
  bool augment = true;
  bool balance = true;

  // Throws ContractError on non-positive rates, zero epochs and the like.
  void validate() const;
  // Every stage's epoch count divided by `divisor`, at least 1.
  TrainConfig scaled(std::size_t divisor) const;
};

// Default schedule divided by ten, for desk-scale runs.
TrainConfig desk_config();

// Keys: input_size, cell_size, scale, kappa, stage{1,2,3}_epochs,
// stage{1,2,3}_lr, baseline_epochs, baseline_lr, batch_size, folds, seed,
// localizer_stride, augment, balance.
void set_config_value(TrainConfig& config, std::string_view key, std::string_view value);
std::vector<std::string> config_keys();

// '#' comments, blank lines, `key = value`; values may be quoted.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::string format_config(const TrainConfig& config);

}  // namespace cellstn
