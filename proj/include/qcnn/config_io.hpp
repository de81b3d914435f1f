#pragma once

#include "qcnn/model_zoo.hpp"
#include "qcnn/train.hpp"

#include <json.hpp>

namespace qcnn {

using Json = nlohmann::ordered_json;

// Every field is written explicitly, defaults included, so a serialized
// config fully determines the run.
Json to_json(const QuantConfig& q);
Json to_json(const ModelSpec& spec);
Json to_json(const TrainConfig& config);
Json to_json(const EpochMetrics& m);
Json quant_constants_json();
Json normalization_json(DatasetName dataset);

QuantConfig quant_config_from_json(const Json& j);
ModelSpec model_spec_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
EpochMetrics epoch_metrics_from_json(const Json& j);

}  // namespace qcnn
