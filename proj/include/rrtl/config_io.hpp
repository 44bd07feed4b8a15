#pragma once

#include <string>

#include "rrtl/datagen.hpp"

namespace rrtl::datagen {

// Declarative JSON forms of the generator and shift configurations; the full
// field reference lives in the README.
std::string generator_config_to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const std::string& text);
GeneratorConfig load_generator_config(const std::string& path);
void save_generator_config(const GeneratorConfig& cfg, const std::string& path);

std::string shift_spec_to_json(const ShiftSpec& spec);
ShiftSpec shift_spec_from_json(const std::string& text);

}  // namespace rrtl::datagen
