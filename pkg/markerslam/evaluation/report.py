import json
from typing import Dict, List, Sequence

from markerslam.evaluation.metrics import SequenceComparison, aggregate_score

_COLUMNS = ('sequence', 'e_ab', 'e_ba', 't_a', 't_b', 'common', 'score_ab', 'score_ba')


def _cell(value: object) -> str:
    if isinstance(value, float):
        return f'{value:.6f}'
    return str(value)


def format_table(rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> str:
    cells = [[_cell(row.get(column, '')) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(line[i]) for line in cells]) for i, column in enumerate(columns)]
    header = '  '.join(column.ljust(width) for column, width in zip(columns, widths))
    lines = [header, '  '.join('-' * width for width in widths)]
    for line in cells:
        lines.append('  '.join(cell.rjust(width) for cell, width in zip(line, widths)))
    return '\n'.join(lines) + '\n'


def comparison_text(comparisons: Sequence[SequenceComparison], rho: float) -> str:
    rows = [comparison.as_row() for comparison in comparisons]
    text = format_table(rows, _COLUMNS)
    if comparisons:
        pairs = [(comparison.score_ab, comparison.score_ba) for comparison in comparisons]
        text += f'aggregate score (rho={rho:g}): {aggregate_score(pairs):+.6f}\n'
    return text


def comparison_jsonl(comparisons: Sequence[SequenceComparison], rho: float) -> str:
    lines: List[str] = []
    for comparison in comparisons:
        row = dict(comparison.as_row(), rho=rho)
        lines.append(json.dumps(row, sort_keys=True))
    if comparisons:
        pairs = [(comparison.score_ab, comparison.score_ba) for comparison in comparisons]
        lines.append(json.dumps({'aggregate': aggregate_score(pairs), 'rho': rho, 'sequences': len(comparisons)},
                                sort_keys=True))
    return ''.join(line + '\n' for line in lines)
