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

import csv
import json
import logging
import os
from abc import abstractmethod

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from far_config import FarConfig, MANDATORY_REPORT_FORMATS  # noqa: E402
from far_metrics import CSV_HEADER, MetricsReport  # noqa: E402

REPORT_BASENAME = "report"


class ReportWriter:
    """
    Writers turn a metrics report into a file in the output directory.
    """

    @abstractmethod
    def get_id(self) -> str:
        """
        The ID is used to activate the writer in the configuration
        """
        pass

    def get_description(self) -> str:
        """
        The description of the writer to be printed out in the logs
        """
        return ""

    @abstractmethod
    def process(self, report: MetricsReport, out_dir: str) -> str:
        """
        Writes the report and returns the path of the written file
        """
        pass


class JsonReportWriter(ReportWriter):
    def get_id(self) -> str:
        return "json"

    def get_description(self) -> str:
        return "JSON metrics report"

    def process(self, report: MetricsReport, out_dir: str) -> str:
        path = os.path.join(out_dir, f"{REPORT_BASENAME}.json")
        with open(path, "w") as f:
            f.write(report.to_json())
            f.write("\n")
        return path


class CsvReportWriter(ReportWriter):
    def get_id(self) -> str:
        return "csv"

    def get_description(self) -> str:
        return "CSV metrics table"

    def process(self, report: MetricsReport, out_dir: str) -> str:
        path = os.path.join(out_dir, f"{REPORT_BASENAME}.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            writer.writerows(report.csv_rows())
        return path


class SvgReportWriter(ReportWriter):
    """Recall against distance threshold per band, and recall against range band per threshold"""

    def get_id(self) -> str:
        return "svg"

    def get_description(self) -> str:
        return "SVG recall plots"

    def process(self, report: MetricsReport, out_dir: str) -> str:
        path = os.path.join(out_dir, f"{REPORT_BASENAME}.svg")
        fig, (by_threshold, by_range) = plt.subplots(1, 2, figsize=(10, 4))
        try:
            for band in report.bands:
                thresholds = [t.threshold for t in band.thresholds]
                by_threshold.plot(thresholds, [t.recall for t in band.thresholds], marker="o", label=band.band)
            by_threshold.set_xlabel("center distance threshold [m]")
            by_threshold.set_ylabel("3D recall")
            by_threshold.set_ylim(0.0, 1.05)
            by_threshold.legend(title="range band")

            labels = [band.band for band in report.bands]
            thresholds = [t.threshold for t in report.bands[0].thresholds] if report.bands else []
            for t in thresholds:
                by_range.plot(labels, [band.threshold(t).recall for band in report.bands], marker="o", label=f"{t:g} m")
            by_range.set_xlabel("range band [m]")
            by_range.set_ylim(0.0, 1.05)
            by_range.legend(title="threshold")
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
        return path


class ReportWriterFactory:
    def __init__(self, config: FarConfig):
        self.__log = logging.getLogger(ReportWriterFactory.__name__)
        self.__config = config

    def create_writers(self) -> list[ReportWriter]:
        writers = []
        self.__append_writer(writers, JsonReportWriter())
        self.__append_writer(writers, CsvReportWriter())
        self.__append_writer(writers, SvgReportWriter())
        return writers

    def __append_writer(self, writers: list[ReportWriter], writer: ReportWriter):
        is_writer_active = writer.get_id() in self.__config.report_formats
        self.__log.info(
            'Feature "{}": {}'.format(writer.get_description(), "enabled" if is_writer_active else "disabled")
        )
        if is_writer_active:
            writers.append(writer)


def emit_report(report: MetricsReport, path: str, formats: list[str] | None = None) -> list[str]:
    """Writes the report into directory `path`. JSON and CSV are always written."""
    formats = MANDATORY_REPORT_FORMATS if formats is None else formats
    os.makedirs(path, exist_ok=True)
    writers = ReportWriterFactory(FarConfig(report_formats=formats)).create_writers()
    return [writer.process(report, path) for writer in writers]


def write_jsonl(path: str, records) -> str:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")
    return path


def read_jsonl(path: str) -> list[dict]:
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]
