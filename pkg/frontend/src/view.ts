/**
 * Display derivations and HTML fragments for a session.
 *
 * All functions are pure string builders over server responses, so the
 * rendering layer can be exercised without a browser. Exact probabilities
 * ride along in data-p / title attributes; the visible text rounds them.
 */

import { Answer, SessionState, TraceStep } from "./api.js";

export interface TraceRow {
    position: number;
    queryIndex: number;
    queryText: string;
    answer: Answer;
    /** Posterior after this answer, straight from the server; null for "unsure". */
    posterior: number[] | null;
    /** Elementwise change versus the previous committed posterior. */
    delta: number[] | null;
}

export function classLabels(nClasses: number): string[] {
    return Array.from({ length: nClasses }, (_, i) => `class ${i}`);
}

/** Fold the step log into display rows, tracking per-step posterior deltas. */
export function traceRows(prior: number[], steps: TraceStep[],
                          queryTexts: string[]): TraceRow[] {
    const rows: TraceRow[] = [];
    let previous = prior;
    steps.forEach((step, i) => {
        const committed = step.posterior !== undefined;
        const posterior = committed ? step.posterior! : null;
        rows.push({
            position: i + 1,
            queryIndex: step.query,
            queryText: queryTexts[step.query] ?? `query ${step.query}`,
            answer: step.answer,
            posterior,
            delta: posterior ? posterior.map((p, k) => p - previous[k]) : null,
        });
        if (posterior) previous = posterior;
    });
    return rows;
}

/** The class whose probability moved the most in this step. */
export function topDelta(delta: number[]): { index: number; value: number } {
    let index = 0;
    for (let k = 1; k < delta.length; k++) {
        if (Math.abs(delta[k]) > Math.abs(delta[index])) index = k;
    }
    return { index, value: delta[index] };
}

export function posteriorBars(posterior: number[], labels: string[],
                              predicted: number, highlight: boolean): string {
    return posterior.map((p, i) => {
        const top = highlight && i === predicted;
        return `<div class="bar${top ? " bar-top" : ""}" data-p="${p}" title="${p}">
  <span class="bar-label">${escapeHtml(labels[i] ?? `class ${i}`)}</span>
  <span class="bar-track"><span class="bar-fill" style="width:${pct(p)}"></span></span>
  <span class="bar-value">${pct(p)}</span>
</div>`;
    }).join("\n");
}

export function traceList(rows: TraceRow[], labels: string[]): string {
    if (!rows.length) return `<p class="empty">No answers yet.</p>`;
    const items = rows.map(row => {
        const text = escapeHtml(row.queryText);
        if (!row.delta) {
            return `<li class="trace-step trace-skip" data-query="${row.queryIndex}">` +
                `<b>${text}</b> — not sure (skipped, no budget used)</li>`;
        }
        const move = topDelta(row.delta);
        const label = escapeHtml(labels[move.index] ?? `class ${move.index}`);
        return `<li class="trace-step" data-query="${row.queryIndex}">` +
            `<b>${text}</b> — ${row.answer} ` +
            `<span class="delta">(${label} ${signed(move.value)})</span></li>`;
    });
    return `<ol class="trace">\n${items.join("\n")}\n</ol>`;
}

export function skippedList(skipped: number[], queryTexts: string[]): string {
    if (!skipped.length) return `<p class="empty">None.</p>`;
    const items = skipped.map(q =>
        `<li data-query="${q}">${escapeHtml(queryTexts[q] ?? `query ${q}`)}</li>`);
    return `<ul class="skipped">\n${items.join("\n")}\n</ul>`;
}

export function statusLine(state: SessionState, labels: string[]): string {
    if (state.status === "done") {
        const label = labels[state.predicted] ?? `class ${state.predicted}`;
        const why = state.termination === "confidence"
            ? "confidence reached" : "queries exhausted";
        return `done — ${why}; predicted ${label} at ${pct(state.confidence)}`;
    }
    return `asked ${state.asked_count} of ${state.budget} · ` +
        `stops at ${pct(state.stop_threshold)}`;
}

export function pct(p: number): string {
    return `${(100 * p).toFixed(1)}%`;
}

function signed(v: number): string {
    return `${v >= 0 ? "+" : ""}${v.toFixed(3)}`;
}

export function escapeHtml(s: string): string {
    return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
        .replace(/"/g, "&quot;");
}
