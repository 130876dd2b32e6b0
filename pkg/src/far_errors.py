# Licensed to the Apache Software Foundation (ASF) under one
# or more contributor license agreements.  See the NOTICE file
# distributed with this work for additional information
# regarding copyright ownership.  The ASF licenses this file
# to you under the Apache License, Version 2.0 (the
# "License"); you may not use this file except in compliance
# with the License.  You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing,
# software distributed under the License is distributed on an
# "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
# KIND, either express or implied.  See the License for the
# specific language governing permissions and limitations
# under the License.


class FarError(ValueError):
    """
    Raised when an operation rejects its input.

    Results that are merely flagged (out-of-bounds samples, empty ground truth, undefined errors)
    are reported through result fields and never raised.
    """

    pass


class GeometryError(FarError):
    pass


class DepthBinError(FarError):
    pass


class QueryError(FarError):
    pass


class AggregationError(FarError):
    pass


class DenoiseError(FarError):
    pass


class MatchingError(FarError):
    pass


class SceneConfigError(FarError):
    pass
