"""
Servicio de dominio para el informe de la matriz: tablas, diferencias pareadas y figuras.
"""
import math
from typing import Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
from matplotlib.figure import Figure

from ..models.experiment import RESULT_COLUMNS, EvalRecord
from ..models.scene import Task

TASK_ORDER = [t.value for t in Task]
DIRECTION_TASKS = ("relation", "locate")
DIRECTION_QUORUM = 0.8


def _task_key(series: pd.Series) -> pd.Series:
    return series.map(lambda t: TASK_ORDER.index(t) if t in TASK_ORDER else len(TASK_ORDER))


def _markdown_table(headers: List[str], rows: List[List[str]]) -> str:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


class ReportService:
    """
    Agrega los EvalRecord de la matriz y produce el informe en Markdown.

    Todas las cifras del informe son funciones de las filas de ``results.csv``.
    """

    def results_frame(self, records: List[EvalRecord]) -> pd.DataFrame:
        """
        Convierte los registros en un DataFrame ordenado de forma determinista.

        Args:
            records (List[EvalRecord]): Registros de evaluación

        Returns:
            pd.DataFrame: Columnas RESULT_COLUMNS, ordenado por variante, semilla y tarea
        """
        df = pd.DataFrame([r.to_dict() for r in records], columns=list(RESULT_COLUMNS))
        return self.sort_results(df)

    def sort_results(self, df: pd.DataFrame) -> pd.DataFrame:
        df = df.sort_values(["variant", "seed", "task"], key=lambda s: _task_key(s) if s.name == "task" else s)
        return df.reset_index(drop=True)

    def summary(self, df: pd.DataFrame) -> pd.DataFrame:
        """Media, desviación típica muestral y número de semillas por variante y tarea."""
        grouped = df.groupby(["variant", "task"])["accuracy"]
        out = pd.DataFrame({'mean': grouped.mean(), 'std': grouped.std(ddof=1), 'n': grouped.count()})
        return out.reset_index()

    def accuracy_table(self, df: pd.DataFrame) -> str:
        """Tabla variantes × tareas con ``media ± std``; la mejor celda de cada columna en negrita."""
        stats = self.summary(df)
        variants = sorted(stats["variant"].unique())
        tasks = [t for t in TASK_ORDER if t in set(stats["task"])]
        tasks += sorted(set(stats["task"]) - set(tasks))
        best = stats.groupby("task")["mean"].max()
        rows = []
        for variant in variants:
            row = [variant]
            for task in tasks:
                cell = stats[(stats["variant"] == variant) & (stats["task"] == task)]
                if cell.empty:
                    row.append("-")
                    continue
                mean, std, n = float(cell["mean"].iloc[0]), cell["std"].iloc[0], int(cell["n"].iloc[0])
                text = f"{mean:.3f}" if n < 2 or pd.isna(std) else f"{mean:.3f} ± {float(std):.3f}"
                if np.isclose(mean, best[task], rtol=0.0, atol=1e-12):
                    text = f"**{text}**"
                row.append(text)
            rows.append(row)
        return _markdown_table(["variante"] + tasks, rows)

    def paired_deltas(self, df: pd.DataFrame) -> pd.DataFrame:
        """
        Diferencias por semilla y tarea: rope2d − rope1d con el codificador fijo y
        generative − contrastive con el esquema fijo.
        """
        rows = []
        comparisons = (
            ("rope2d-rope1d", "encoder", "pe", "rope2d", "rope1d"),
            ("generative-contrastive", "pe", "encoder", "generative", "contrastive"),
        )
        for name, fixed, varied, plus, minus in comparisons:
            wide = df.pivot_table(index=[fixed, "seed", "task"], columns=varied, values="accuracy", aggfunc="first")
            if plus not in wide.columns or minus not in wide.columns:
                continue
            wide = wide.dropna(subset=[plus, minus])
            for (group, seed, task), values in wide.iterrows():
                rows.append({'comparison': name, 'group': group, 'seed': int(seed), 'task': task,
                             'delta': float(values[plus] - values[minus])})
        deltas = pd.DataFrame(rows, columns=["comparison", "group", "seed", "task", "delta"])
        if deltas.empty:
            return deltas
        deltas = deltas.sort_values(["comparison", "group", "seed", "task"],
                                    key=lambda s: _task_key(s) if s.name == "task" else s, kind="mergesort")
        return deltas.reset_index(drop=True)

    def per_seed_table(self, deltas: pd.DataFrame) -> str:
        """Una fila por comparación, grupo y semilla; una columna por tarea."""
        tasks = [t for t in TASK_ORDER if t in set(deltas["task"])]
        tasks += sorted(set(deltas["task"]) - set(tasks))
        rows = []
        for (comparison, group, seed), block in deltas.groupby(["comparison", "group", "seed"], sort=True):
            values = dict(zip(block["task"], block["delta"]))
            rows.append([comparison, str(group), str(seed)]
                        + [f"{values[t]:+.3f}" if t in values else "-" for t in tasks])
        return _markdown_table(["comparación", "grupo", "semilla"] + tasks, rows)

    def sign_counts(self, deltas: pd.DataFrame) -> pd.DataFrame:
        if deltas.empty:
            return pd.DataFrame(columns=["comparison", "group", "task", "mean_delta", "positive", "negative", "zero"])
        grouped = deltas.groupby(["comparison", "group", "task"])["delta"]
        out = pd.DataFrame({
            'mean_delta': grouped.mean(),
            'positive': grouped.apply(lambda d: int((d > 0).sum())),
            'negative': grouped.apply(lambda d: int((d < 0).sum())),
            'zero': grouped.apply(lambda d: int((d == 0).sum())),
        }).reset_index()
        return out.sort_values(["comparison", "group", "task"], key=lambda s: _task_key(s) if s.name == "task" else s)

    def encoder_direction(self, df: pd.DataFrame) -> Dict:
        """
        ¿El codificador generativo iguala o supera al contrastivo en la media de
        relación y localización en al menos el 80% de las semillas?
        """
        subset = df[df["task"].isin(DIRECTION_TASKS)]
        per_seed = subset.groupby(["seed", "encoder"])["accuracy"].mean().unstack("encoder")
        if per_seed.empty or "generative" not in per_seed.columns or "contrastive" not in per_seed.columns:
            return {'applicable': False}
        per_seed = per_seed.dropna()
        deltas = per_seed["generative"] - per_seed["contrastive"]
        seeds = len(deltas)
        favorable = int((deltas >= 0).sum())
        required = math.ceil(DIRECTION_QUORUM * seeds)
        return {'applicable': seeds > 0, 'seeds': seeds, 'favorable': favorable, 'required': required,
                'holds': seeds > 0 and favorable >= required}

    def shuffle_check(self, shuffle_df: Optional[pd.DataFrame]) -> Dict:
        """¿Alguna variante pierde estrictamente más exactitud en relación que en conteo al permutar?"""
        if shuffle_df is None or shuffle_df.empty:
            return {'applicable': False}
        drops = shuffle_df.assign(drop=shuffle_df["accuracy"] - shuffle_df["shuffled_accuracy"])
        table = drops.groupby(["variant", "task"])["drop"].mean().unstack("task")
        if "relation" not in table.columns or "count" not in table.columns:
            return {'applicable': False}
        passing = sorted(table.index[table["relation"] > table["count"]].tolist())
        return {'applicable': True, 'holds': bool(passing), 'variants': passing}

    def render_markdown(self, df: pd.DataFrame, attention_df: Optional[pd.DataFrame] = None,
                        shuffle_df: Optional[pd.DataFrame] = None) -> str:
        """
        Informe completo en Markdown.

        Args:
            df (pd.DataFrame): Filas de results.csv
            attention_df (Optional[pd.DataFrame]): Filas de attention.csv
            shuffle_df (Optional[pd.DataFrame]): Filas de shuffle.csv

        Returns:
            str: Texto del informe (determinista para las mismas filas)
        """
        df = self.sort_results(df)
        seeds = sorted(df["seed"].unique())
        parts = ["# Informe de la matriz de experimentos", "",
                 f"Semillas: {', '.join(str(s) for s in seeds)}. Celdas: media ± desviación típica muestral "
                 f"sobre semillas; en negrita la mejor variante de cada tarea.", "",
                 "## Exactitud por variante", "", self.accuracy_table(df), ""]

        deltas = self.paired_deltas(df)
        counts = self.sign_counts(deltas)
        parts += ["## Diferencias pareadas por semilla", ""]
        if counts.empty:
            parts += ["Sin pares comparables en la matriz.", ""]
        else:
            parts += [self.per_seed_table(deltas), "", "### Resumen de signos", ""]
            rows = [[r.comparison, r.group, r.task, f"{r.mean_delta:+.3f}", str(r.positive), str(r.negative),
                     str(r.zero)] for r in counts.itertuples()]
            parts += [_markdown_table(["comparación", "grupo", "tarea", "Δ medio", "+", "-", "="], rows), ""]

        parts += ["## Comprobaciones", ""]
        direction = self.encoder_direction(df)
        if direction['applicable']:
            verdict = "se cumple" if direction['holds'] else "NO se cumple (dirección opuesta a la esperada)"
            parts.append(f"- Dirección del codificador (generative ≥ contrastive en relation+locate): "
                         f"{direction['favorable']}/{direction['seeds']} semillas, se requieren "
                         f"{direction['required']}: {verdict}.")
        else:
            parts.append("- Dirección del codificador: no aplica (faltan codificadores o tareas).")
        check = self.shuffle_check(shuffle_df)
        if check['applicable']:
            verdict = (f"se cumple en {', '.join(check['variants'])}" if check['holds']
                       else "NO se cumple en ninguna variante")
            parts.append(f"- Sonda de permutación (caída en relation > caída en count): {verdict}.")
        else:
            parts.append("- Sonda de permutación: no aplica (sin resultados de la sonda).")
        parts.append("")

        if attention_df is not None and not attention_df.empty:
            agg = (attention_df.groupby(["variant", "task"])
                   .agg(target_fraction=("target_fraction", "mean"), null_fraction=("null_fraction", "mean"),
                        image_mass=("image_mass", "mean"), n=("item", "count"))
                   .reset_index())
            agg = agg.sort_values(["variant", "task"], key=lambda s: _task_key(s) if s.name == "task" else s)
            rows = [[r.variant, r.task, f"{r.target_fraction:.3f}", f"{r.null_fraction:.3f}",
                     f"{r.target_fraction - r.null_fraction:+.3f}", f"{r.image_mass:.3f}", str(r.n)]
                    for r in agg.itertuples()]
            parts += ["## Atención hacia el objeto consultado", "",
                      _markdown_table(["variante", "tarea", "fracción objetivo", "nula uniforme", "efecto",
                                       "masa en imagen", "ítems"], rows), ""]

        if shuffle_df is not None and not shuffle_df.empty:
            agg = (shuffle_df.groupby(["variant", "task"])
                   .agg(accuracy=("accuracy", "mean"), shuffled=("shuffled_accuracy", "mean"))
                   .reset_index())
            agg = agg.sort_values(["variant", "task"], key=lambda s: _task_key(s) if s.name == "task" else s)
            rows = [[r.variant, r.task, f"{r.accuracy:.3f}", f"{r.shuffled:.3f}", f"{r.shuffled - r.accuracy:+.3f}"]
                    for r in agg.itertuples()]
            parts += ["## Sonda de permutación de parches", "",
                      _markdown_table(["variante", "tarea", "exactitud", "permutada", "Δ"], rows), ""]
        return "\n".join(parts)

    def accuracy_figure(self, df: pd.DataFrame) -> Optional[Figure]:
        """Barras de exactitud media por tarea y variante, con la desviación entre semillas."""
        if df.empty:
            return None
        fig, ax = plt.subplots(figsize=(9, 4.5))
        order = [t for t in TASK_ORDER if t in set(df["task"])]
        sns.barplot(data=df, x="task", y="accuracy", hue="variant", order=order,
                    hue_order=sorted(df["variant"].unique()), errorbar="sd", ax=ax)
        ax.set_title("Exactitud por tarea y variante")
        ax.set_xlabel("Tarea")
        ax.set_ylabel("Exactitud")
        ax.set_ylim(0, 1)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        return fig

    def attention_figure(self, mean_maps: Dict[str, np.ndarray]) -> Optional[Figure]:
        """
        Mapas de calor de la atención media sobre la rejilla de parches, uno por variante.

        Args:
            mean_maps (Dict[str, np.ndarray]): Variante -> mapa (filas, columnas)
        """
        if not mean_maps:
            return None
        names = sorted(mean_maps)
        fig, axes = plt.subplots(1, len(names), figsize=(3.5 * len(names), 3.5), squeeze=False)
        for ax, name in zip(axes[0], names):
            sns.heatmap(mean_maps[name], cmap="viridis", square=True, cbar=False, ax=ax)
            ax.set_title(name, fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle("Atención media hacia los parches", fontsize=11)
        fig.tight_layout()
        return fig
