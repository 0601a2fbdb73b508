class ExporterError(Exception):
    """Base class for exporter failures."""


class ImageNotFound(ExporterError):
    def __init__(self, paths: list[str]):
        shown = ", ".join(paths[:5])
        more = f" (+{len(paths) - 5} more)" if len(paths) > 5 else ""
        super().__init__(f"missing images: {shown}{more}")
        self.paths = paths


class DecodeError(ExporterError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class ModelLoadError(ExporterError):
    pass


class ManifestError(ExporterError):
    pass
