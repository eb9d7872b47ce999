// Umbrella header.
#pragma once

#include "planereg/dataset.hpp"
#include "planereg/error.hpp"
#include "planereg/geometry.hpp"
#include "planereg/image.hpp"
#include "planereg/io.hpp"
#include "planereg/kdtree.hpp"
#include "planereg/losses.hpp"
#include "planereg/metrics.hpp"
#include "planereg/parallel.hpp"
#include "planereg/pipeline.hpp"
#include "planereg/ply.hpp"
#include "planereg/renderer.hpp"
#include "planereg/scenefield.hpp"
#include "planereg/trainer.hpp"
#include "planereg/vec3.hpp"
