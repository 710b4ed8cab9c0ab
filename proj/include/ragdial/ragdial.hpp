#pragma once

#include "common.hpp"
#include "corpus.hpp"
#include "encode.hpp"
#include "index.hpp"
#include "retrieve.hpp"
#include "generate.hpp"
#include "marginal.hpp"
#include "metrics.hpp"
#include "harness.hpp"
