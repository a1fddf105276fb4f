"""Python Logging 制御モジュール

パッケージ全体で共有するロガー ``pyequicpi`` と、そのハンドラ設定を提供する。
"""
from logging.handlers import SysLogHandler
from logging.handlers import RotatingFileHandler
from logging import handlers
import logging
import socket
from enum import Enum
import os

_FORMAT = "%(asctime)s : %(levelname)s : %(module)s : %(lineno)d : %(message)s"


class LoggingLevel(Enum):
    ALL: logging = logging.NOTSET
    DEBUG: logging = logging.DEBUG
    INFO: logging = logging.INFO
    WARNING: logging = logging.WARNING
    ERROR: logging = logging.ERROR
    CRITICAL: logging = logging.CRITICAL
    DISABLE: None = None

    @classmethod
    def from_name(cls, name: str) -> "LoggingLevel":
        """CLI引数などの文字列からレベルを得る（大文字小文字は区別しない）"""
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"Unknown logging level: {name}") from None


class SysLog:
    """パッケージロガーとハンドラ構成

    各モジュールは ``logger = SysLog.logger`` としてロガーを取得する。
    ハンドラはアプリケーション（CLI）側でクラスメソッドにより追加する。
    """

    address: str = "127.0.0.1"
    port: int = handlers.SYSLOG_UDP_PORT
    facility: int = handlers.SysLogHandler.LOG_USER
    socktype: socket = socket.SOCK_DGRAM
    file_path: os.PathLike = "pyequicpi.log"
    app_name: str = "pyequicpi"
    logger: logging.Logger = logging.getLogger(app_name)

    @classmethod
    def console_log_configuration(cls, level: LoggingLevel = LoggingLevel.CRITICAL):
        log_level = level.value
        if log_level is not None:
            stream_handler = logging.StreamHandler()
            stream_handler.setFormatter(logging.Formatter(_FORMAT))
            stream_handler.setLevel(log_level)
            cls.logger.addHandler(stream_handler)

    @classmethod
    def rotation_log_configuration(cls, level: LoggingLevel = LoggingLevel.CRITICAL, file_path: os.PathLike = None):
        log_level = level.value
        if log_level is not None:
            filename = file_path if file_path is not None else cls.file_path
            file_handler = RotatingFileHandler(filename=filename, maxBytes=100000, backupCount=10, encoding="utf-8")
            file_handler.setFormatter(logging.Formatter(_FORMAT))
            file_handler.setLevel(log_level)
            cls.logger.addHandler(file_handler)

    @classmethod
    def syslog_configuration(cls, level: LoggingLevel = LoggingLevel.CRITICAL):
        log_level = level.value
        if log_level is not None:
            formatter = logging.Formatter(cls.app_name + ": %(levelname)s : %(module)s : %(lineno)d : %(message)s")

            syslog_handler = SysLogHandler(
                address=(cls.address, cls.port),
                facility=cls.facility,
                socktype=cls.socktype,
            )
            syslog_handler.setFormatter(formatter)
            syslog_handler.setLevel(log_level)
            cls.logger.addHandler(syslog_handler)

    @classmethod
    def set_loglevel(cls, level: LoggingLevel = LoggingLevel.CRITICAL):
        if level.value is None:
            # no record passes; handlers stay attached
            cls.logger.setLevel(logging.CRITICAL + 1)
        else:
            cls.logger.setLevel(level.value)

    @classmethod
    def reset(cls):
        """追加済みハンドラを全て外す（CLIを同一プロセスで繰り返し実行する場合）"""
        for handler in list(cls.logger.handlers):
            cls.logger.removeHandler(handler)
            handler.close()
