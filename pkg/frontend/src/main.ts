/**
 * DOM bootstrap: wires the controls to the controller and repaints the page
 * from the controller's state after every request.
 *
 * Served same-origin by `uaip serve --ui-dir`; add `?api=http://host:port`
 * to point at a server running elsewhere.
 */

import { SessionApi } from "./api.js";
import { AppState, SessionController } from "./app.js";
import {
    classLabels, pct, posteriorBars, skippedList, statusLine, traceList,
    traceRows,
} from "./view.js";

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

const statusEl = el<HTMLElement>("status");
const errorEl = el<HTMLElement>("error");
const questionEl = el<HTMLElement>("question");
const barsEl = el<HTMLElement>("bars");
const traceEl = el<HTMLElement>("trace");
const skippedEl = el<HTMLElement>("skipped");
const thresholdInput = el<HTMLInputElement>("threshold");
const startBtn = el<HTMLButtonElement>("start");
const resetBtn = el<HTMLButtonElement>("reset");
const answerBtns = {
    yes: el<HTMLButtonElement>("answer-yes"),
    no: el<HTMLButtonElement>("answer-no"),
    unsure: el<HTMLButtonElement>("answer-unsure"),
} as const;

const apiBase = new URLSearchParams(window.location.search).get("api") ?? "";
const controller = new SessionController(new SessionApi(apiBase), render);

function render(state: AppState): void {
    const { model, session } = state;
    const labels = classLabels(model?.n_classes ?? session?.posterior.length ?? 0);
    const texts = model?.query_texts ?? [];

    errorEl.textContent = state.error ?? "";
    if (model && !thresholdInput.placeholder) {
        thresholdInput.placeholder = String(model.stop_threshold);
    }

    if (!session) {
        statusEl.textContent = model
            ? `${model.n_queries} queries, ${model.n_classes} classes — start a session`
            : "loading model…";
        questionEl.innerHTML = "";
        barsEl.innerHTML = "";
        traceEl.innerHTML = "";
        skippedEl.innerHTML = "";
    } else {
        statusEl.textContent = statusLine(session, labels);
        questionEl.innerHTML = questionHtml(session, labels);
        barsEl.innerHTML = posteriorBars(session.posterior, labels,
                                         session.predicted,
                                         session.status === "done");
        traceEl.innerHTML = traceList(
            traceRows(state.prior ?? session.posterior, session.steps, texts),
            labels);
        skippedEl.innerHTML = skippedList(session.skipped, texts);
    }

    const canAnswer = !state.busy && session?.status === "active"
        && session.next_query !== null;
    for (const btn of Object.values(answerBtns)) btn.disabled = !canAnswer;
    startBtn.disabled = state.busy || model === null;
    resetBtn.disabled = state.busy || session === null;
}

function questionHtml(session: NonNullable<AppState["session"]>,
                      labels: string[]): string {
    if (session.status === "done") {
        const label = labels[session.predicted] ?? `class ${session.predicted}`;
        return `<span class="verdict">${label}</span> ` +
            `<span class="confidence">${pct(session.confidence)}</span>`;
    }
    if (session.next_query) {
        return `<span class="prompt">${escapeText(session.next_query.text)}</span>`;
    }
    return "";
}

function escapeText(s: string): string {
    const div = document.createElement("div");
    div.textContent = s;
    return div.innerHTML;
}

startBtn.onclick = () => {
    const raw = thresholdInput.value.trim();
    void controller.start(raw ? { stopThreshold: Number(raw) } : {});
};
resetBtn.onclick = () => void controller.reset();
answerBtns.yes.onclick = () => void controller.answer("yes");
answerBtns.no.onclick = () => void controller.answer("no");
answerBtns.unsure.onclick = () => void controller.answer("unsure");

void controller.loadModel();
