import os
import tempfile
from pathlib import Path
from typing import Union


def write_atomic(path: Union[str, Path], payload: Union[bytes, str]) -> None:
    """Writes through a temporary sibling file renamed over the target."""
    target = Path(path)
    if target.parent and not target.parent.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode('utf-8') if isinstance(payload, str) else payload
    handle, temporary = tempfile.mkstemp(prefix=f'.{target.name}.', dir=str(target.parent or Path('.')))
    try:
        with os.fdopen(handle, 'wb') as stream:
            stream.write(data)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(temporary, target)
    except BaseException:
        if os.path.exists(temporary):
            os.unlink(temporary)
        raise
