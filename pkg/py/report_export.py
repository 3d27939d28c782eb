import logging
from pathlib import Path
from typing import Union

import pandas as pd
from openpyxl.styles import Alignment, Font, PatternFill

logger = logging.getLogger(__name__)

SHEET_NAME = "Avaliacao"
HEADER_COLOR = "47C7DA"


def write_report(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    """
    Grava a tabela critérios × estágios. `.xlsx` gera planilha com cabeçalho
    formatado; qualquer outra extensão gera CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if path.suffix.lower() != ".xlsx":
        table.to_csv(path, index=False, float_format="%.6f")
        logger.info("Relatório CSV gravado em %s", path)
        return path

    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        table.to_excel(writer, sheet_name=SHEET_NAME, index=False)
        worksheet = writer.book[SHEET_NAME]

        header_fill = PatternFill(start_color=HEADER_COLOR, end_color=HEADER_COLOR, fill_type="solid")
        header_font = Font(bold=True, color="FFFFFF")
        for cell in worksheet[1]:
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = Alignment(horizontal="center")

        for row in worksheet.iter_rows(min_row=2, min_col=3):
            for cell in row:
                cell.number_format = "0.000"
                cell.alignment = Alignment(horizontal="right")

        for column in worksheet.columns:
            width = max(len(str(cell.value)) for cell in column if cell.value is not None)
            worksheet.column_dimensions[column[0].column_letter].width = min(width + 2, 50)

    logger.info("Relatório XLSX gravado em %s", path)
    return path
