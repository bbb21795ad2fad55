/**
 * Typed client for the query-session HTTP API.
 *
 * Every shape here mirrors a server response verbatim; the client never
 * derives posteriors or proposals on its own.
 */

export type Answer = "yes" | "no" | "unsure";

export interface QueryRef {
    index: number;
    text: string;
}

export interface TraceStep {
    query: number;
    answer: Answer;
    /** Posterior after the answer was committed; absent for "unsure". */
    posterior?: number[];
}

export interface SessionState {
    session_id: string;
    status: "active" | "done";
    posterior: number[];
    next_query: QueryRef | null;
    steps: TraceStep[];
    skipped: number[];
    asked_count: number;
    budget: number;
    stop_threshold: number;
    termination: "confidence" | "exhausted" | null;
    predicted: number;
    confidence: number;
    created_at: string;
    updated_at: string;
    /** Only present on the create response. */
    prior_posterior?: number[];
    first_query?: QueryRef | null;
}

export interface ModelInfo {
    n_queries: number;
    n_classes: number;
    variant: string;
    stop_threshold: number;
    budget: number;
    query_texts: string[];
}

export interface DeleteResult {
    deleted: boolean;
    session_id: string;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
    constructor(public status: number, public detail: string) {
        super(`HTTP ${status}: ${detail}`);
        this.name = "ApiError";
    }
}

export class SessionApi {
    private fetchFn: FetchLike;

    constructor(private baseUrl = "", fetchFn?: FetchLike) {
        this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
    }

    getModel(): Promise<ModelInfo> {
        return this.request<ModelInfo>("GET", "/model");
    }

    createSession(opts: { stop_threshold?: number; budget?: number } = {}):
            Promise<SessionState> {
        return this.request<SessionState>("POST", "/sessions", opts);
    }

    submitAnswer(sessionId: string, queryIndex: number, answer: Answer):
            Promise<SessionState> {
        return this.request<SessionState>(
            "POST", `/sessions/${sessionId}/answer`,
            { query_index: queryIndex, answer });
    }

    getSession(sessionId: string): Promise<SessionState> {
        return this.request<SessionState>("GET", `/sessions/${sessionId}`);
    }

    deleteSession(sessionId: string): Promise<DeleteResult> {
        return this.request<DeleteResult>("DELETE", `/sessions/${sessionId}`);
    }

    private async request<T>(method: string, path: string, body?: unknown):
            Promise<T> {
        const init: RequestInit = { method };
        if (body !== undefined) {
            init.headers = { "content-type": "application/json" };
            init.body = JSON.stringify(body);
        }
        const resp = await this.fetchFn(this.baseUrl + path, init);
        if (!resp.ok) {
            throw new ApiError(resp.status, await errorDetail(resp));
        }
        return resp.json() as Promise<T>;
    }
}

async function errorDetail(resp: Response): Promise<string> {
    try {
        const data = await resp.json();
        if (typeof data.detail === "string") return data.detail;
        if (data.detail !== undefined) return JSON.stringify(data.detail);
        return JSON.stringify(data);
    } catch {
        return resp.statusText || "request failed";
    }
}
