#pragma once

#include <string>

#include "cal3/synthdata.hpp"

namespace cal3 {

// Dataset directory layout: one subdirectory per case holding `volume.f32`
// (raw little-endian row-major floats), `shape.txt` ("S S S"), and
// `record.json`; plus a top-level `split.json` mapping case id to
// "train" | "test". Case ids are "case_0000", "case_0001", ...

std::string case_id(int index);

void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace cal3
