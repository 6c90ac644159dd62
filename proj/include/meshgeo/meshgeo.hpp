#pragma once

#include "meshgeo/apps.hpp"
#include "meshgeo/autodiff.hpp"
#include "meshgeo/common.hpp"
#include "meshgeo/geometry.hpp"
#include "meshgeo/layers.hpp"
#include "meshgeo/mesh.hpp"
#include "meshgeo/model.hpp"
#include "meshgeo/primitives.hpp"
#include "meshgeo/sampling.hpp"
#include "meshgeo/sparse.hpp"
#include "meshgeo/training.hpp"
