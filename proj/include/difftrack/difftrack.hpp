// Copyright 2026 The difftrack Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "difftrack/autodiff.hpp"
#include "difftrack/fod_volume.hpp"
#include "difftrack/gradcheck.hpp"
#include "difftrack/io/csv.hpp"
#include "difftrack/io/nifti.hpp"
#include "difftrack/io/tck.hpp"
#include "difftrack/metrics.hpp"
#include "difftrack/peak_finder.hpp"
#include "difftrack/propagator.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/synth.hpp"
#include "difftrack/types.hpp"
