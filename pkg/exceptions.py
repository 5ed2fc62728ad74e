#!/usr/bin/env python
# coding: utf-8


class PPSeqError(Exception):
    """Base class for every error raised on purpose by this package."""
    exit_code = 1


class ConfigError(PPSeqError, ValueError):
    exit_code = 2


class DataFormatError(PPSeqError, ValueError):
    """
    Malformed input file
    :param message: description of the problem
    :param line: 1-based line number in the offending file, if known
    """
    exit_code = 3

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = 'line {}: {}'.format(line, message)
        super().__init__(message)


class DegenerateInputError(PPSeqError, ValueError):
    exit_code = 4


class CheckpointVersionError(PPSeqError):
    exit_code = 5
