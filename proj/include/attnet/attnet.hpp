#pragma once

#include "attnet/checkpoint.hpp"
#include "attnet/commands.hpp"
#include "attnet/config.hpp"
#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/gradcheck.hpp"
#include "attnet/metrics.hpp"
#include "attnet/model.hpp"
#include "attnet/pgm.hpp"
#include "attnet/random.hpp"
#include "attnet/tape.hpp"
#include "attnet/taskgen.hpp"
#include "attnet/tensor.hpp"
#include "attnet/trainer.hpp"
