#pragma once

#include "lcd/autodiff.hpp"
#include "lcd/dataio.hpp"
#include "lcd/geometry.hpp"
#include "lcd/lcdloss.hpp"
#include "lcd/params.hpp"
#include "lcd/reconnet.hpp"
#include "lcd/trainer.hpp"
