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

import os
import logging

LOG_DEST_STDOUT = "STDOUT"
LOG_DEST_STDERR = "STDERR"

REPORT_FORMATS = ["json", "csv", "svg"]
MANDATORY_REPORT_FORMATS = ["json", "csv"]


class SceneLogger(logging.LoggerAdapter):
    """Prefixes every message with the seed of the scene being simulated."""

    def __init__(self, logger: logging.Logger, seed: int | None):
        super().__init__(logger, {"seed": seed})

    def process(self, msg, kwargs):
        seed = self.extra["seed"]
        adapted_msg = "[seed {}] {}".format(seed, msg) if seed is not None else msg
        return adapted_msg, kwargs


class FarEnv:
    @staticmethod
    def integer(env_var_name: str, default_value: int = None) -> int:
        value = os.getenv(env_var_name)
        if value:
            try:
                return int(value)
            except Exception:
                raise TypeError(f"Environment variable '{env_var_name}' is not a valid integer")
        elif default_value is not None:
            return default_value
        else:
            raise KeyError(f"Required environment variable '{env_var_name}' is not set")

    @staticmethod
    def floating(env_var_name: str, default_value: float = None) -> float:
        value = os.getenv(env_var_name)
        if value:
            try:
                return float(value)
            except Exception:
                raise TypeError(f"Environment variable '{env_var_name}' is not a valid number")
        elif default_value is not None:
            return default_value
        else:
            raise KeyError(f"Required environment variable '{env_var_name}' is not set")

    @staticmethod
    def string(env_var_name: str, default_value: str = None) -> str | None:
        value = os.getenv(env_var_name)
        if value:
            return value
        elif default_value is not None:
            return default_value
        else:
            raise KeyError(f"Required environment variable '{env_var_name}' is not set")


class FarConfig:
    """
    Process level settings. Scene and pipeline parameters live in the scene config file,
    see far_scene.SceneConfig.
    """

    def __init__(
        self,
        log_level="INFO",
        log_stream=LOG_DEST_STDOUT,
        threads: int = 1,
        report_formats: list[str] = MANDATORY_REPORT_FORMATS,
        check_scale: float = 1.0,
    ):
        if threads < 1:
            raise ValueError(f"FAR_THREADS must be at least 1, got {threads}")
        unsupported = [f for f in report_formats if f not in REPORT_FORMATS]
        if unsupported:
            raise ValueError(f"Unsupported report formats {unsupported}, supported: {','.join(REPORT_FORMATS)}")
        if check_scale <= 0:
            raise ValueError(f"FAR_CHECK_SCALE must be positive, got {check_scale}")
        self.log_level = log_level
        self.log_stream = log_stream
        self.threads = threads
        self.report_formats = sorted(set(report_formats) | set(MANDATORY_REPORT_FORMATS), key=REPORT_FORMATS.index)
        self.check_scale = check_scale

    def scene_logger(self, logger: logging.Logger, seed: int | None) -> SceneLogger:
        return SceneLogger(logger, seed)

    @staticmethod
    def from_env():
        return FarConfig(
            log_level=FarEnv.string("LOG_LEVEL", "INFO"),
            log_stream=FarEnv.string("LOG_STREAM", LOG_DEST_STDOUT),
            threads=FarEnv.integer("FAR_THREADS", 1),
            report_formats=FarConfig.__read_item_list(FarEnv.string("FAR_REPORT_FORMATS", "json,csv")),
            check_scale=FarEnv.floating("FAR_CHECK_SCALE", 1.0),
        )

    @staticmethod
    def __read_item_list(value: str) -> list[str]:
        return [p.strip() for p in value.split(",") if p.strip()]
