class WostError(Exception):
    pass


class SceneError(WostError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(path)
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class GeometryError(WostError):
    pass


class FieldError(WostError):
    pass


class ConfigError(WostError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ImageError(WostError):
    pass
