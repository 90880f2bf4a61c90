#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "odeflow/dynamics.hpp"
#include "odeflow/tensor.hpp"

namespace odeflow {

// Binary parameter container, all integers and reals little-endian:
//
//   "ODEV" | version u32 | D u32 | H u32 | M u32 | r u32 | kind u8
//   then sections until end of file:
//   name_len u16 | name bytes | count u64 | count x f64
enum class ContainerKind : std::uint8_t { Block = 0, Teacher = 1, Student = 2 };

inline constexpr std::uint32_t kContainerVersion = 1;

struct ContainerHeader {
  std::uint32_t version = kContainerVersion;
  std::uint32_t dim = 0;
  std::uint32_t heads = 0;
  std::uint32_t patches = 0;
  std::uint32_t mlp_ratio = 0;
  ContainerKind kind = ContainerKind::Block;

  friend bool operator==(const ContainerHeader&, const ContainerHeader&) = default;
};

struct Section {
  std::string name;
  std::vector<double> values;

  friend bool operator==(const Section&, const Section&) = default;
};

struct Container {
  ContainerHeader header;
  std::vector<Section> sections;

  void put(std::string name, std::vector<double> values);
  void put(std::string name, const Tensor& t) { put(std::move(name), std::vector<double>(t.values().begin(), t.values().end())); }
  bool has(std::string_view name) const;
  const Section& get(std::string_view name) const;
  Tensor tensor(std::string_view name, Shape shape) const;
  double scalar(std::string_view name) const;

  friend bool operator==(const Container&, const Container&) = default;
};

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

void put_block(Container& c, const std::string& prefix, const BlockParams& p);
/// Reads `prefix`+name sections into p, which must already have the right shapes.
void get_block(const Container& c, const std::string& prefix, BlockParams& p);

Container block_container(const BlockParams& p, std::uint32_t patches);
BlockParams block_from_container(const Container& c);

/// Write via a temporary sibling file and rename over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace odeflow
