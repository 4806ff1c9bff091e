#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <vector>

#include "fedcspc/prototype.hpp"

// Structured-text files exchanged between simulated clients and the server.
//
//   # fedcspc-exchange 1
//   prototype,<client>,<class>,<cluster>,<repeat>,v1,...,vd
//   global,<class>,v1,...,vd
//   exemplar,<class>,v1,...,vd
//
// Values are written in shortest round-trip form, so reading a file back
// reproduces every double bit for bit.
namespace fedcspc {

using ClassVectors = std::map<ClassId, std::vector<double>>;

void write_prototypes(std::ostream& out, const std::vector<Prototype>& prototypes);
std::vector<Prototype> read_prototypes(std::istream& in);

// `kind` is "global" for global prototypes and "exemplar" for the knowledge base.
void write_class_vectors(std::ostream& out, const ClassVectors& vectors, const char* kind);
ClassVectors read_class_vectors(std::istream& in, const char* kind);

void save_prototypes(const std::filesystem::path& path, const std::vector<Prototype>& prototypes);
std::vector<Prototype> load_prototypes(const std::filesystem::path& path);
void save_class_vectors(const std::filesystem::path& path, const ClassVectors& vectors, const char* kind);
ClassVectors load_class_vectors(const std::filesystem::path& path, const char* kind);

}  // namespace fedcspc
