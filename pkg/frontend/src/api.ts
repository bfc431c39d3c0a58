// Typed client for the generation service. Non-2xx responses throw an
// ApiError; callers decide whether that is a banner (unexpected) or a
// state hint (409/423 during normal interaction).

export type ClassInfo = { id: number; name: string };

export type ClassesInfo = {
    classes: ClassInfo[];
    train_len: number;
    variant: string;
    max_target_len: number;
    image_h: number;
    band_width: number;
};

export type SessionConfig = {
    class_id: number;
    target_len: number;
    seed: number;
    cfg_start: number;
    cfg_end: number;
    n_steps: number;
    temperature: number;
};

export type CreateSessionRequest = {
    class_id: number;
    target_len: number;
    seed?: number;
    cfg_start?: number;
    cfg_end?: number;
    n_steps?: number;
};

export type StepResult = {
    position: number;
    token_norm: number;
    image_strip: string; // base64 PNG of the newly decodable column band
    done: boolean;
};

export class ApiError extends Error {
    constructor(public status: number, message: string) {
        super(message);
    }
}

async function parseOrThrow<T>(resp: Response): Promise<T> {
    if (!resp.ok) {
        let message = `${resp.status}`;
        try {
            const body = await resp.json();
            if (body && typeof body.error === 'string') message = body.error;
        } catch {
            /* non-JSON error body */
        }
        throw new ApiError(resp.status, message);
    }
    return resp.json() as Promise<T>;
}

export class ApiClient {
    constructor(
        private baseUrl: string,
        private fetchFn: typeof fetch = fetch,
    ) {}

    private url(path: string): string {
        return this.baseUrl.replace(/\/$/, '') + path;
    }

    async classes(): Promise<ClassesInfo> {
        return parseOrThrow(await this.fetchFn(this.url('/v1/classes')));
    }

    async createSession(body: CreateSessionRequest): Promise<{ session_id: string; config: SessionConfig }> {
        return parseOrThrow(
            await this.fetchFn(this.url('/v1/sessions'), {
                method: 'POST',
                headers: { 'Content-Type': 'application/json' },
                body: JSON.stringify(body),
            }),
        );
    }

    async step(sessionId: string): Promise<StepResult> {
        return parseOrThrow(
            await this.fetchFn(this.url(`/v1/sessions/${sessionId}/step`), { method: 'POST' }),
        );
    }

    async reject(sessionId: string): Promise<StepResult> {
        return parseOrThrow(
            await this.fetchFn(this.url(`/v1/sessions/${sessionId}/reject`), { method: 'POST' }),
        );
    }

    imageUrl(sessionId: string): string {
        return this.url(`/v1/sessions/${sessionId}/image`);
    }

    async deleteSession(sessionId: string): Promise<void> {
        await this.fetchFn(this.url(`/v1/sessions/${sessionId}`), { method: 'DELETE' });
    }
}
