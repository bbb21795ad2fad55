/**
 * Session controller: the single mutable spot in the client.
 *
 * It keeps exactly what the server last said (plus the prior posterior from
 * the create response, needed for the first trace delta) and serializes
 * requests — while one is in flight, further actions are ignored and the
 * buttons are disabled. It never recomputes posteriors or picks queries.
 */

import {
    Answer, ApiError, ModelInfo, SessionApi, SessionState,
} from "./api.js";

export interface AppState {
    model: ModelInfo | null;
    session: SessionState | null;
    /** Posterior before any answer, from the create response. */
    prior: number[] | null;
    busy: boolean;
    error: string | null;
}

export interface StartOptions {
    stopThreshold?: number;
    budget?: number;
}

export class SessionController {
    readonly state: AppState = {
        model: null, session: null, prior: null, busy: false, error: null,
    };

    constructor(private api: SessionApi,
                private onChange: (state: AppState) => void = () => {}) {}

    async loadModel(): Promise<void> {
        await this.exclusive(async () => {
            this.state.model = await this.api.getModel();
        });
    }

    /** Start a fresh session, replacing this tab's previous one if any. */
    async start(opts: StartOptions = {}): Promise<void> {
        await this.exclusive(async () => {
            await this.dropCurrent();
            const created = await this.api.createSession({
                stop_threshold: opts.stopThreshold,
                budget: opts.budget,
            });
            this.state.session = created;
            this.state.prior = created.prior_posterior ?? created.posterior;
        });
    }

    /** Answer the pending query; no-op unless a query is actually pending. */
    async answer(answer: Answer): Promise<void> {
        await this.exclusive(async () => {
            const s = this.state.session;
            if (!s || s.status !== "active" || !s.next_query) return;
            this.state.session = await this.api.submitAnswer(
                s.session_id, s.next_query.index, answer);
        });
    }

    async reset(): Promise<void> {
        await this.exclusive(async () => {
            await this.dropCurrent();
            this.state.session = null;
            this.state.prior = null;
        });
    }

    private async dropCurrent(): Promise<void> {
        const s = this.state.session;
        if (!s) return;
        try {
            await this.api.deleteSession(s.session_id);
        } catch {
            // Already gone (e.g. the server restarted); nothing to release.
        }
    }

    private async exclusive(task: () => Promise<void>): Promise<void> {
        if (this.state.busy) return;
        this.state.busy = true;
        this.state.error = null;
        this.onChange(this.state);
        try {
            await task();
        } catch (err) {
            this.state.error =
                err instanceof ApiError ? err.detail : String(err);
        } finally {
            this.state.busy = false;
            this.onChange(this.state);
        }
    }
}
