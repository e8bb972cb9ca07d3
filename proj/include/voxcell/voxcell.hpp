#pragma once

#include "error.hpp"
#include "geometry.hpp"
#include "elements.hpp"
#include "lattice.hpp"
#include "ingest.hpp"
#include "voxelizer.hpp"
#include "tensor/tensor.hpp"
#include "tensor/graph.hpp"
#include "tensor/ops.hpp"
#include "tensor/losses.hpp"
#include "tensor/optim.hpp"
#include "tensor/layers.hpp"
#include "tensor/checkpoint.hpp"
#include "models/config.hpp"
#include "models/networks.hpp"
#include "models/latent.hpp"
#include "models/training.hpp"
#include "segmenter.hpp"
#include "metrics.hpp"
