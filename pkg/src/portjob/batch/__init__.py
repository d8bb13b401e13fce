"""Backend for command-line batch schedulers described by declarative dialects."""
from portjob.batch.adapter import (AdapterError, DialectError, IdParseError, Polled,
                                   QueueAdapterDescriptor, StatusCommandFailed, SubmitScript,
                                   UnsupportedAttribute, descriptor_from_dict, load_dialect,
                                   parse_native_id, poll_once, render_directives, render_script)
from portjob.batch.executor import BatchExecutor, CancelFailed

__all__ = [
    'AdapterError', 'BatchExecutor', 'CancelFailed', 'DialectError', 'IdParseError', 'Polled',
    'QueueAdapterDescriptor', 'StatusCommandFailed', 'SubmitScript', 'UnsupportedAttribute',
    'descriptor_from_dict', 'load_dialect', 'parse_native_id', 'poll_once', 'render_directives',
    'render_script',
]
