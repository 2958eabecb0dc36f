#pragma once

#include "wmhseg/errors.hpp"
#include "wmhseg/tensor.hpp"
#include "wmhseg/autograd.hpp"
#include "wmhseg/ops.hpp"
#include "wmhseg/fft.hpp"
#include "wmhseg/rng.hpp"
#include "wmhseg/segnet.hpp"
#include "wmhseg/loss.hpp"
#include "wmhseg/volume.hpp"
#include "wmhseg/nifti.hpp"
#include "wmhseg/preprocess.hpp"
#include "wmhseg/artifacts.hpp"
#include "wmhseg/phantom.hpp"
#include "wmhseg/manifest.hpp"
#include "wmhseg/optimizer.hpp"
#include "wmhseg/checkpoint.hpp"
#include "wmhseg/trainer.hpp"
