#pragma once

#include "pcsnet/adam.hpp"
#include "pcsnet/autodiff.hpp"
#include "pcsnet/cas.hpp"
#include "pcsnet/checkpoint.hpp"
#include "pcsnet/dataset.hpp"
#include "pcsnet/evaluate.hpp"
#include "pcsnet/image_io.hpp"
#include "pcsnet/kernels.hpp"
#include "pcsnet/layers.hpp"
#include "pcsnet/losses.hpp"
#include "pcsnet/metrics.hpp"
#include "pcsnet/model.hpp"
#include "pcsnet/parallel.hpp"
#include "pcsnet/pfa.hpp"
#include "pcsnet/rng.hpp"
#include "pcsnet/synth.hpp"
#include "pcsnet/tensor.hpp"
#include "pcsnet/trainer.hpp"
