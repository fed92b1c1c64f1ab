#pragma once

#include "grn/autograd.hpp"
#include "grn/config.hpp"
#include "grn/error.hpp"
#include "grn/fft.hpp"
#include "grn/model.hpp"
#include "grn/protocol.hpp"
#include "grn/report.hpp"
#include "grn/signal.hpp"
#include "grn/synchrony.hpp"
#include "grn/train.hpp"
